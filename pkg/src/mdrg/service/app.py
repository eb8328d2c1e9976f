"""HTTP inference service.

Endpoints:
    POST /api/session                   -> {"session_id": ...}
    POST /api/chat                      -> {"segments": [...]}
    GET  /api/image/{id}                -> PNG bytes ( ?b64=1 -> {"png_b64": ...} )
    GET  /api/health                    -> {"status", "checkpoints_loaded"}

Sessions are in-memory and per-session request handling is serialized; model
parameters are shared read-only across sessions. The model root comes from
--models / the MDRG_HOME env var.
"""

from __future__ import annotations

import base64
import threading
import uuid

from fastapi import FastAPI, HTTPException
from fastapi.responses import Response as HttpResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .. import imageio
from ..agent import AgentError, ChatAgent, ImageReply, TextReply
from ..generator import Utterance

DEFAULT_PORT = 8800
HOME_ENV = "MDRG_HOME"


class ChatOptions(BaseModel):
    pure_text: bool = False
    beam: int = Field(default=5, ge=1)
    n_samples: int = Field(default=8, ge=1)
    temperature: float = Field(default=1.0, ge=0.0)
    seed: int | None = None


class ChatRequest(BaseModel):
    session_id: str
    text: str | None = None
    image_description: str | None = None  # user shares an image, given by its description
    options: ChatOptions = Field(default_factory=ChatOptions)


class TextSegmentOut(BaseModel):
    kind: str = "text"
    text: str


class ImageSegmentOut(BaseModel):
    kind: str = "image"
    image_id: str
    description: str
    topk: list[str]


class ChatResponse(BaseModel):
    segments: list[TextSegmentOut | ImageSegmentOut]
    degenerate: bool = False


class SessionOut(BaseModel):
    session_id: str


class HealthOut(BaseModel):
    status: str
    checkpoints_loaded: bool


class _Session:
    def __init__(self) -> None:
        self.turns: list[Utterance] = []
        self.lock = threading.Lock()


def create_app(model_dir: str | None = None, ui_dir: str | None = None, agent: ChatAgent | None = None) -> FastAPI:
    app = FastAPI(title="mdrg inference service")
    sessions: dict[str, _Session] = {}
    images: dict[str, bytes] = {}
    if agent is None and model_dir is not None:
        try:
            agent = ChatAgent.load(model_dir)
        except AgentError:
            agent = None
    app.state.agent = agent

    @app.get("/api/health", response_model=HealthOut)
    def health() -> HealthOut:
        loaded = app.state.agent is not None
        return HealthOut(status="ok" if loaded else "no_model", checkpoints_loaded=loaded)

    @app.post("/api/session", response_model=SessionOut)
    def new_session() -> SessionOut:
        sid = uuid.uuid4().hex
        sessions[sid] = _Session()
        return SessionOut(session_id=sid)

    @app.post("/api/chat", response_model=ChatResponse)
    def chat(req: ChatRequest) -> ChatResponse:
        if app.state.agent is None:
            raise HTTPException(status_code=503, detail="model checkpoints not loaded")
        session = sessions.get(req.session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {req.session_id}")
        if not req.text and not req.image_description:
            raise HTTPException(status_code=422, detail="message needs text or image_description")
        with session.lock:
            if req.image_description:
                session.turns.append(
                    Utterance(speaker=0, image_description=req.image_description)
                )
            if req.text:
                session.turns.append(Utterance(speaker=0, text=req.text))
            reply = app.state.agent.respond(
                session.turns,
                pure_text=req.options.pure_text,
                beam=req.options.beam,
                n_samples=req.options.n_samples,
                temperature=req.options.temperature,
                seed=req.options.seed,
            )
            segments: list[TextSegmentOut | ImageSegmentOut] = []
            for event in reply.events:
                if isinstance(event, TextReply):
                    segments.append(TextSegmentOut(text=event.text))
                    session.turns.append(Utterance(speaker=1, text=event.text))
                elif isinstance(event, ImageReply):
                    topk = []
                    for img in event.candidates:
                        img_id = uuid.uuid4().hex
                        images[img_id] = imageio.png_bytes(img)
                        topk.append(img_id)
                    segments.append(
                        ImageSegmentOut(
                            image_id=topk[0], description=event.description, topk=topk
                        )
                    )
                    session.turns.append(
                        Utterance(speaker=1, image_description=event.description)
                    )
            return ChatResponse(segments=segments, degenerate=reply.degenerate)

    @app.get("/api/image/{image_id}")
    def get_image(image_id: str, b64: int = 0):
        data = images.get(image_id)
        if data is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id}")
        if b64:
            return {"png_b64": base64.b64encode(data).decode("ascii")}
        return HttpResponse(content=data, media_type="image/png")

    if ui_dir:
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app


def serve(model_dir: str | None, port: int = DEFAULT_PORT, ui_dir: str | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(model_dir, ui_dir=ui_dir), host="127.0.0.1", port=port)
