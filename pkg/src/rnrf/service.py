"""Local HTTP service for interactive parameter-driven rendering.

Endpoints: GET /health, GET /meta (parameter dimensions and observed ranges,
default camera, preset parameters), POST /render (JSON body -> PNG bytes).
Connections are handled concurrently but renders run on one worker thread in
strict FIFO order; the checkpoint is never mutated, so identical requests
with identical seeds return identical bytes.
"""

from __future__ import annotations

import io
import json
import queue
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
from PIL import Image

from .camera import Camera, orbit_camera
from .errors import ParameterError
from .headmodel import HeadParams

RESOLUTION_MIN = 16
RESOLUTION_MAX = 256
MAP_NAMES = ("depth", "ddelta", "dhat")
_MAP_KEYS = {"depth": "depth", "ddelta": "delta_mag", "dhat": "dhat_mag"}


class RequestError(ValueError):
    """Invalid render request; carries the offending field name."""

    def __init__(self, field, message):
        super().__init__(message)
        self.field = field


def _expect_vector(body, field, length, default=None):
    if field not in body:
        if default is not None:
            return np.asarray(default, dtype=np.float64)
        raise RequestError(field, f"missing required field '{field}'")
    val = body[field]
    if not isinstance(val, (list, tuple)) or len(val) != length:
        raise RequestError(field, f"'{field}' must be a list of {length} numbers")
    try:
        arr = np.asarray([float(x) for x in val], dtype=np.float64)
    except (TypeError, ValueError):
        raise RequestError(field, f"'{field}' must contain only numbers")
    if not np.isfinite(arr).all():
        raise RequestError(field, f"'{field}' must be finite")
    return arr


def parse_render_request(body: dict, pipeline) -> dict:
    """Validate a /render body against the checkpoint's dimensions."""
    if not isinstance(body, dict):
        raise RequestError("body", "request body must be a JSON object")
    num_exp = pipeline.model.num_exp
    beta_exp = _expect_vector(body, "beta_exp", num_exp, default=np.zeros(num_exp))
    pose = _expect_vector(body, "beta_pose", 7, default=np.zeros(7))
    jaw = float(pose[6])
    if not 0.0 <= jaw <= np.pi / 2:
        raise RequestError("beta_pose", f"jaw angle {jaw} outside [0, pi/2]")
    params = HeadParams(beta_exp=beta_exp, rotation=pose[:3], translation=pose[3:6], jaw=jaw)

    resolution = body.get("resolution", 96)
    if not isinstance(resolution, int) or isinstance(resolution, bool):
        raise RequestError("resolution", "'resolution' must be an integer")
    clamped = min(max(resolution, RESOLUTION_MIN), RESOLUTION_MAX)

    seed = body.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise RequestError("seed", "'seed' must be an integer")

    maps = body.get("maps", {})
    if not isinstance(maps, dict) or any(k not in MAP_NAMES for k in maps):
        raise RequestError("maps", f"'maps' must be an object with keys among {MAP_NAMES}")
    selected = [m for m in MAP_NAMES if maps.get(m)]

    camera_spec = body.get("camera")
    if camera_spec is None:
        camera = Camera.from_dict(pipeline.meta["default_camera"])
    elif isinstance(camera_spec, dict) and "orbit" in camera_spec:
        orbit = camera_spec["orbit"]
        try:
            look_at = orbit.get("look_at", (0.0, 0.0, 0.0))
            base = Camera.from_dict(pipeline.meta["default_camera"])
            camera = orbit_camera(
                float(orbit["azimuth"]), float(orbit["elevation"]), float(orbit["radius"]),
                target=look_at, fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
                near=base.near, far=base.far,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RequestError("camera", f"bad orbit camera: {exc}")
    elif isinstance(camera_spec, dict):
        try:
            camera = Camera.from_dict(camera_spec)
        except (KeyError, TypeError, ValueError, ParameterError) as exc:
            raise RequestError("camera", f"bad camera: {exc}")
    else:
        raise RequestError("camera", "'camera' must be an object")

    # intrinsics follow the requested resolution relative to the training one
    train_w = pipeline.meta.get("width", clamped)
    scale = clamped / train_w
    camera = Camera(
        fx=camera.fx * scale, fy=camera.fy * scale,
        cx=(clamped - 1) / 2.0, cy=(clamped - 1) / 2.0,
        rotation=camera.rotation, origin=camera.origin,
        near=camera.near, far=camera.far,
    )
    return {
        "params": params,
        "camera": camera,
        "resolution": clamped,
        "clamped": clamped != resolution,
        "seed": seed,
        "maps": selected,
    }


def render_to_png(pipeline, req: dict) -> bytes:
    """Render a parsed request and encode the response PNG.

    With no map flags the color image is returned; with flags set the
    selected maps are concatenated horizontally (color excluded)."""
    res = req["resolution"]
    out = pipeline.render(
        req["camera"], req["params"], pipeline.omega.data[0], pipeline.phi.data[0],
        res, res, seed=req["seed"],
    )
    if not req["maps"]:
        img = np.clip(out["color"], 0.0, 1.0)
        data = (np.round(img * 255)).astype(np.uint8)
    else:
        import matplotlib

        panels = []
        for name in req["maps"]:
            arr = out[_MAP_KEYS[name]]
            lo, hi = float(arr.min()), float(arr.max())
            norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
            cmap = "magma" if name == "depth" else "viridis"
            panels.append((matplotlib.colormaps[cmap](norm)[..., :3] * 255).astype(np.uint8))
        data = np.concatenate(panels, axis=1)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class RenderService:
    """FIFO single-flight render queue over a read-only pipeline."""

    def __init__(self, pipeline):
        self.pipeline = pipeline
        self.jobs = queue.Queue()
        self.worker = threading.Thread(target=self._run, daemon=True)
        self.worker.start()

    def _run(self):
        while True:
            job = self.jobs.get()
            if job is None:
                return
            req, box, done = job
            try:
                t0 = time.perf_counter()
                box["png"] = render_to_png(self.pipeline, req)
                box["millis"] = (time.perf_counter() - t0) * 1e3
            except Exception as exc:  # surfaced as a 500 by the handler
                box["error"] = str(exc)
            finally:
                done.set()

    def render(self, req: dict) -> dict:
        box = {}
        done = threading.Event()
        self.jobs.put((req, box, done))
        done.wait()
        return box

    def meta(self) -> dict:
        p = self.pipeline
        return {
            "num_exp": p.model.num_exp,
            "pose_dims": 7,
            "code_dim": int(p.omega.data.shape[1]),
            "stats": p.meta.get("stats", {}),
            "default_camera": p.meta.get("default_camera"),
            "presets": p.meta.get("presets", []),
            "train_resolution": [p.meta.get("width"), p.meta.get("height")],
            "resolution_limits": [RESOLUTION_MIN, RESOLUTION_MAX],
            "step": p.step,
            "mode": p.config.mode.value,
        }

    def close(self):
        self.jobs.put(None)


def make_handler(service: RenderService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, code, body: bytes, content_type="application/json", headers=()):
            self.send_response(code)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            # the browser viewer is served from a different origin
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Expose-Headers",
                             "X-Render-Millis, X-Resolution-Clamped")
            for k, v in headers:
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def _send_json(self, code, obj, headers=()):
            self._send(code, json.dumps(obj).encode("utf-8"), headers=headers)

        def do_GET(self):
            if self.path == "/health":
                self._send_json(200, {"status": "ok"})
            elif self.path == "/meta":
                self._send_json(200, service.meta())
            else:
                self._send_json(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            if self.path != "/render":
                self._send_json(404, {"error": f"unknown path {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
            except (ValueError, json.JSONDecodeError) as exc:
                self._send_json(400, {"error": f"invalid JSON body: {exc}", "field": "body"})
                return
            try:
                req = parse_render_request(body, service.pipeline)
            except RequestError as exc:
                self._send_json(400, {"error": str(exc), "field": exc.field})
                return
            box = service.render(req)
            if "error" in box:
                self._send_json(500, {"error": box["error"]})
                return
            headers = [("X-Render-Millis", f"{box['millis']:.1f}")]
            if req["clamped"]:
                headers.append(("X-Resolution-Clamped", str(req["resolution"])))
            self._send(200, box["png"], content_type="image/png", headers=headers)

    return Handler


def start_server(pipeline, host="127.0.0.1", port=0):
    """Start serving in background threads; returns (server, service)."""
    service = RenderService(pipeline)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, service


def serve(pipeline, host="127.0.0.1", port=8765):
    """Blocking entry point used by the CLI."""
    service = RenderService(pipeline)
    server = ThreadingHTTPServer((host, port), make_handler(service))
    print(f"render service listening on http://{host}:{server.server_address[1]}"
          f"  (/meta /render /health)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.close()
        server.server_close()
    return 0
