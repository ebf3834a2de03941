"""HTTP batch prediction: up to ``max_batch`` PNG tiles per request, optional denoise pass."""

from __future__ import annotations

import base64
import binascii
import logging
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .dataset import ImageIOError, decode_png_bytes
from .models import Network, denoise, load_checkpoint, model_id, predict

log = logging.getLogger(__name__)

DEFAULT_MAX_BATCH = 50


class RequestError(Exception):
    """Client error carrying an HTTP status."""

    def __init__(self, status: int, code: str, detail: str):
        super().__init__(detail)
        self.status, self.code, self.detail = status, code, detail


def resize_nearest(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an HxWxC array to ``shape`` (rows, cols)."""
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(shape[0]) + 0.5) * h / shape[0], h - 1).astype(int)
    cols = np.minimum((np.arange(shape[1]) + 0.5) * w / shape[1], w - 1).astype(int)
    return img[rows][:, cols]


@dataclass
class Predictor:
    """Read-only model bundle; ``handle`` turns raw payloads into the response body."""

    cnn: Network
    dae: Network | None = None
    max_batch: int = DEFAULT_MAX_BATCH
    started: float = field(default_factory=time.monotonic)

    def __post_init__(self):
        if self.cnn.spec.class_names is None:
            raise ValueError("classifier checkpoint carries no class names")
        if self.dae is not None and tuple(self.dae.spec.input_shape) != tuple(self.cnn.spec.input_shape):
            raise ValueError(f"denoiser input {tuple(self.dae.spec.input_shape)} does not match "
                             f"classifier input {tuple(self.cnn.spec.input_shape)}")
        self.model_id = model_id(self.cnn)
        self.dae_id = model_id(self.dae) if self.dae is not None else None

    @property
    def label_set(self) -> str | None:
        return self.cnn.spec.label_set

    @property
    def class_names(self) -> list[str]:
        return list(self.cnn.spec.class_names)

    def health(self) -> dict:
        return {"status": "ok", "model_id": self.model_id, "denoiser_id": self.dae_id,
                "version": __version__, "uptime_s": round(time.monotonic() - self.started, 3)}

    def labels(self) -> dict:
        return {"label_set": self.label_set, "classes": self.class_names}

    def handle(self, payloads: list[bytes | None], use_dae: bool = False, batch_id: str | None = None) -> dict:
        t0 = time.perf_counter()
        if not payloads:
            raise RequestError(422, "empty_batch", "request must contain at least one image")
        if len(payloads) > self.max_batch:
            raise RequestError(413, "payload_limit",
                               f"{len(payloads)} images sent; at most {self.max_batch} per request")
        if use_dae and self.dae is None:
            raise RequestError(400, "no_denoiser", "denoise requested but no denoising model is loaded")
        h, w, c = self.cnn.spec.input_shape
        items: list[dict] = []
        ok_idx, tiles = [], []
        for i, payload in enumerate(payloads):
            item = {"index": i, "status": "ok", "predicted": None, "probabilities": None, "resized": False}
            try:
                if payload is None:
                    raise ImageIOError("payload is not valid base64")
                img = decode_png_bytes(payload, name=f"image {i}")
            except ImageIOError as exc:
                item.update(status="decode_error", error=str(exc))
                items.append(item)
                continue
            if img.shape[:2] != (h, w):
                img = resize_nearest(img, (h, w))
                item["resized"] = True
            items.append(item)
            ok_idx.append(i)
            tiles.append(img[:, :, :c])
        if tiles:
            x = np.stack(tiles).astype(np.float32)
            if use_dae:
                x = denoise(self.dae, x)
            probs, labels = predict(self.cnn, x)
            for k, i in enumerate(ok_idx):
                items[i]["predicted"] = self.class_names[int(labels[k])]
                items[i]["probabilities"] = [float(p) for p in probs[k]]
        return {"batch_id": batch_id, "model_id": self.model_id, "label_set": self.label_set,
                "denoised": bool(use_dae), "items": items,
                "elapsed_ms": round(1000 * (time.perf_counter() - t0), 3)}


def _flag(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _b64(text) -> bytes | None:
    try:
        return base64.b64decode(str(text), validate=True)
    except (binascii.Error, ValueError):
        return None


async def _read_request(request: Request) -> tuple[list[bytes | None], bool, str | None]:
    ctype = request.headers.get("content-type", "")
    if ctype.startswith("multipart/form-data"):
        form = await request.form()
        files = [v for k, v in form.multi_items() if k in ("images", "files", "image") and hasattr(v, "read")]
        payloads = [await f.read() for f in files]
        return payloads, _flag(form.get("denoise", False)), form.get("batch_id")
    if ctype.startswith("application/json"):
        try:
            body = await request.json()
        except ValueError as exc:
            raise RequestError(400, "bad_json", f"request body is not valid JSON ({exc})") from exc
        if not isinstance(body, dict) or not isinstance(body.get("images"), list):
            raise RequestError(422, "validation", "JSON body needs an 'images' list of base64 PNG strings")
        batch_id = body.get("batch_id")
        return ([_b64(s) for s in body["images"]], _flag(body.get("denoise", False)),
                None if batch_id is None else str(batch_id))
    raise RequestError(415, "unsupported_media_type", "send multipart/form-data or application/json")


def create_app(cnn: Network, dae: Network | None = None, max_batch: int = DEFAULT_MAX_BATCH) -> FastAPI:
    predictor = Predictor(cnn, dae, max_batch)
    app = FastAPI(title="amdefect", version=__version__)
    app.state.predictor = predictor

    @app.get("/api/health")
    def health():
        return predictor.health()

    @app.get("/api/labels")
    def labels():
        return predictor.labels()

    @app.post("/api/predict")
    async def predict_endpoint(request: Request):
        try:
            payloads, use_dae, batch_id = await _read_request(request)
            return predictor.handle(payloads, use_dae, batch_id)
        except RequestError as exc:
            return JSONResponse({"error": exc.code, "detail": exc.detail}, status_code=exc.status)
        except Exception:
            error_id = uuid.uuid4().hex[:12]
            log.exception("predict failed (error id %s)", error_id)
            return JSONResponse({"error": "internal", "error_id": error_id}, status_code=500)

    return app


def serve(model_path: str, dae_path: str | None = None, bind: str = "127.0.0.1:8000",
          max_batch: int = DEFAULT_MAX_BATCH) -> None:
    """Load checkpoints (failing fast) and run the app under uvicorn."""
    import uvicorn

    cnn = load_checkpoint(model_path)
    dae = load_checkpoint(dae_path) if dae_path else None
    app = create_app(cnn, dae, max_batch)
    host, _, port = bind.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
