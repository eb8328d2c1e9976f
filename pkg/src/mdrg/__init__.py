"""Low-resource multimodal dialogue response generation.

A dialogue generator emits text and/or textual image descriptions behind a
[DST] protocol; a text-to-image translator turns descriptions into discrete
image tokens; a VQ image codec decodes those tokens to pixels. All three are
small enough to train from scratch on a desk machine.
"""

__version__ = "0.1.0"
