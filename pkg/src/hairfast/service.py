"""HTTP transfer service.

Endpoints (JSON API, versioned under /api):

    GET  /api/health    {"status", "fingerprint", "checkpoints": {file: sha256}}
    POST /api/transfer  multipart form: face (file, required), shape?, color?,
                        mode=full|both|shape|color. Returns
                        {"request_id", "mode", "image": base64 PNG, "timings",
                        "resized", "artifacts"}; with ?format=png the raw
                        PNG bytes instead.

Errors: 400 invalid mode/missing part, 413 oversized body, 422 no face
detected, 503 checkpoints not loaded. The registry is immutable after
startup; transfers are serialized so identical requests give identical
bytes.
"""

from __future__ import annotations

import base64
import io
import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image as PILImage

from . import imgio
from .errors import CheckpointError, DegenerateInputError
from .pipeline import TransferRequest, transfer
from .registry import load_runtime, registry_hashes

MAX_BODY_BYTES = 16 * 1024 * 1024
CLI_MODES = {"full": "full", "both": "both", "shape": "shape_only", "color": "color_only"}
REQUIRED_PARTS = {"full": ("face", "shape", "color"), "both": ("face", "shape"),
                  "shape": ("face", "shape"), "color": ("face", "color")}


def create_app(checkpoint_dir=None, runtime=None, max_body: int = MAX_BODY_BYTES,
               frontend_dir=None) -> FastAPI:
    app = FastAPI(title="hairfast transfer service", version="1")
    app.state.runtime = runtime
    app.state.hashes = {}
    app.state.lock = threading.Lock()
    if runtime is None and checkpoint_dir is not None:
        try:
            app.state.runtime = load_runtime(checkpoint_dir)
            app.state.hashes = registry_hashes(checkpoint_dir)
        except CheckpointError as e:
            app.state.load_error = str(e)

    @app.get("/api/health")
    def health():
        rt = app.state.runtime
        if rt is None:
            return {"status": "no_checkpoint", "error": getattr(app.state, "load_error", None)}
        return {"status": "ok", "fingerprint": rt.cfg.fingerprint(),
                "checkpoints": app.state.hashes}

    async def _read_part(part: UploadFile | None, res: int):
        if part is None:
            return None, False
        data = await part.read()
        if len(data) > max_body:
            return "too_large", False
        try:
            with PILImage.open(io.BytesIO(data)) as img:
                return imgio.to_tensor(img, res)
        except Exception:
            return "bad_image", False

    @app.post("/api/transfer")
    async def do_transfer(request: Request,
                          face: UploadFile = File(...),
                          shape: UploadFile | None = File(None),
                          color: UploadFile | None = File(None),
                          mode: str = Form("full")):
        rt = app.state.runtime
        if rt is None:
            return JSONResponse({"error": "checkpoints not loaded"}, status_code=503)
        length = request.headers.get("content-length")
        if length and int(length) > max_body:
            return JSONResponse({"error": f"body exceeds {max_body} bytes"}, status_code=413)
        if mode not in CLI_MODES:
            return JSONResponse({"error": f"invalid mode {mode!r}"}, status_code=400)
        parts = {"face": face, "shape": shape, "color": color}
        for role in REQUIRED_PARTS[mode]:
            if parts[role] is None:
                return JSONResponse({"error": f"mode {mode!r} is missing part {role!r}",
                                     "missing": role}, status_code=400)
        res = rt.cfg.output_resolution
        images = {}
        resized = {}
        for role in ("face", "shape", "color"):
            value, was_resized = await _read_part(parts[role], res)
            if isinstance(value, str):
                return JSONResponse({"error": f"part {role!r}: {value}"}, status_code=400 if value == "bad_image" else 413)
            images[role] = value
            resized[role] = was_resized
        req = TransferRequest(face=images["face"], shape=images["shape"],
                              color=images["color"], mode=CLI_MODES[mode])
        request_id = str(uuid.uuid4())
        try:
            with app.state.lock:
                result, art = transfer(rt, req)
        except DegenerateInputError as e:
            return JSONResponse({"error": str(e), "stage": e.stage, "request_id": request_id},
                                status_code=422)
        png = imgio.png_bytes(result)
        if request.query_params.get("format") == "png":
            return Response(content=png, media_type="image/png",
                            headers={"x-request-id": request_id})
        return {
            "request_id": request_id,
            "mode": mode,
            "image": base64.b64encode(png).decode(),
            "timings": art.timings,
            "resized": resized,
            "artifacts": {name: stage for name, stage in art.produced_by.items()},
        }

    if frontend_dir and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")
    return app
