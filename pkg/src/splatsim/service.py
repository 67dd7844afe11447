"""Interactive session host: a stepping worker per session, drag gestures
translated into drive regions, and rendered frames streamed over a
websocket at a fixed wall-clock cadence.

Message envelope (protocol v1): each websocket text message is one record,

    KIND SP BYTELEN LF BODY

where KIND is a lowercase token, BYTELEN the UTF-8 byte length of BODY and
BODY a JSON object. Kinds and fields are enumerated in service_schema.json
shipped next to this module. Frames carry base64 PNG (compressed 8-bit RGB).
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
from typing import Optional

import numpy as np
from PIL import Image

from .core import DOMAIN_MAX, DOMAIN_MIN, Camera, ParticleSystem, SceneError, SimConfig
from .estimate import PARAM_NAMES, lam_from_mu
from .motion import select_region
from .mpm import Grid, step
from .renderer import RenderResult, render, to_uint8, unproject_pixel

PROTOCOL_VERSION = 1
DT_CLAMP = (1.0 / 120.0, 1.0 / 5.0)   # wall-clock drag interval clamp, seconds


def encode_message(kind: str, body: dict) -> str:
    payload = json.dumps(body, separators=(",", ":"), sort_keys=True)
    return f"{kind} {len(payload.encode('utf-8'))}\n{payload}"


def parse_message(record: str) -> tuple[str, dict]:
    head, sep, body = record.partition("\n")
    if not sep:
        raise ValueError("malformed record: missing header line")
    parts = head.split(" ")
    if len(parts) != 2:
        raise ValueError("malformed record: header must be 'KIND LENGTH'")
    kind, length = parts[0], parts[1]
    if not kind or not kind.replace("_", "").isalpha():
        raise ValueError(f"malformed record: bad kind {kind!r}")
    try:
        n = int(length)
    except ValueError:
        raise ValueError("malformed record: length is not an integer")
    raw = body.encode("utf-8")
    if len(raw) != n:
        raise ValueError(f"malformed record: length {n} != body bytes {len(raw)}")
    try:
        parsed = json.loads(body) if body else {}
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed record: body is not JSON ({exc})")
    if not isinstance(parsed, dict):
        raise ValueError("malformed record: body must be a JSON object")
    return kind, parsed


def encode_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(rgb), "RGB").save(buf, format="PNG")
    return buf.getvalue()


class _Drag:
    """Live drive region created by a drag gesture."""

    def __init__(self, drag_id: int, tagged: np.ndarray, point: np.ndarray,
                 depth: float):
        self.drag_id = drag_id
        self.tagged_indices = tagged
        self.point = point          # world-space grip target
        self.depth = depth          # camera depth of the grab, fixed per drag
        self.velocity = np.zeros(3)
        self.budget = 0.0           # sim-time seconds the velocity remains valid
        self.last_wall = time.monotonic()

    def velocity_at(self, _t: float) -> np.ndarray:
        # while a drag is held the region is always overridden; an exhausted
        # move budget pins the tissue in place (zero velocity)
        return self.velocity if self.budget > 0.0 else np.zeros(3)


class Session:
    """One interactive simulation session (exclusively owned scene copy).

    A single stepping worker mutates the scene; message handlers and the
    frame streamer only exchange immutable snapshots with it under the
    session lock, so observers always see post-step states.
    """

    def __init__(self, scene: ParticleSystem, config: SimConfig,
                 camera: Camera, fps: float = 10.0,
                 bounds: Optional[dict] = None):
        from .estimate import DEFAULT_BOUNDS
        self.initial = scene.copy()
        self.scene = scene.copy()
        self.config = config
        self.camera = camera
        self.fps = fps
        self.bounds = bounds or DEFAULT_BOUNDS
        self.lock = threading.RLock()
        self.status = "paused"
        self.sim_time = 0.0
        self.frame_index = 0
        self.drags: dict[int, _Drag] = {}
        self._next_drag_id = 1
        self._grid = Grid(config)
        self._snapshot = scene.copy()
        self._render_cache: Optional[RenderResult] = None
        self._render_time = -1.0
        self._worker: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self.error: Optional[str] = None

    # -- stepping ----------------------------------------------------------

    def advance(self, n_steps: int) -> None:
        """Step the simulation n_steps under the session lock."""
        with self.lock:
            drives = list(self.drags.values())
            for _ in range(n_steps):
                step(self.scene, self.config, drives, sim_time=self.sim_time,
                     grid=self._grid)
                self.sim_time += self.config.dt
                for d in drives:
                    if d.budget > 0.0:
                        d.budget -= self.config.dt
            self._snapshot = self.scene.copy()
            self._render_cache = None

    def _worker_loop(self):
        batch = max(1, int(round(self.config.frame_dt / self.config.dt)))
        while not self._stop.is_set():
            if self.status != "running":
                time.sleep(0.005)
                continue
            t0 = time.monotonic()
            try:
                self.advance(batch)
            except Exception as exc:  # pause instead of dying silently
                with self.lock:
                    self.status = "paused"
                    self.error = str(exc)
                continue
            # pace to real time when the sim runs faster
            elapsed = time.monotonic() - t0
            rest = self.config.frame_dt - elapsed
            if rest > 0:
                time.sleep(rest)

    def start_worker(self) -> None:
        if self._worker is None or not self._worker.is_alive():
            self._stop.clear()
            self._worker = threading.Thread(target=self._worker_loop, daemon=True)
            self._worker.start()

    def stop_worker(self) -> None:
        self._stop.set()
        if self._worker is not None:
            self._worker.join(timeout=2.0)
            self._worker = None

    # -- rendering ---------------------------------------------------------

    def snapshot(self) -> ParticleSystem:
        with self.lock:
            return self._snapshot

    def render_current(self) -> tuple[RenderResult, float, int]:
        with self.lock:
            snap = self._snapshot
            t = self.sim_time
            cached = self._render_cache
            if cached is not None and self._render_time == t:
                return cached, t, self.frame_index
        res = render(snap, self.camera)
        with self.lock:
            self._render_cache = res
            self._render_time = t
        return res, t, self.frame_index

    def frame_message(self) -> str:
        res, t, _ = self.render_current()
        with self.lock:
            idx = self.frame_index
            self.frame_index += 1
        png = encode_png(res.rgb)
        return encode_message("frame", {
            "frame_index": idx,
            "sim_time": t,
            "width": self.camera.width,
            "height": self.camera.height,
            "encoding": "png",
            "data": base64.b64encode(png).decode("ascii"),
        })

    # -- message handling ----------------------------------------------------

    def handle_record(self, record: str) -> list[str]:
        try:
            kind, body = parse_message(record)
        except ValueError as exc:
            return [encode_message("error", {"message": str(exc), "for": ""})]
        try:
            return self._dispatch(kind, body)
        except (KeyError, ValueError, TypeError) as exc:
            return [encode_message("error", {"message": str(exc), "for": kind})]

    def _dispatch(self, kind: str, body: dict) -> list[str]:
        if kind == "hello":
            want = int(body.get("protocol", -1))
            if want != PROTOCOL_VERSION:
                return [encode_message("error", {
                    "message": f"protocol mismatch: server speaks "
                               f"{PROTOCOL_VERSION}, client asked {want}",
                    "for": "hello"})]
            with self.lock:
                pos = self.scene.position
                mat = self.scene.material
                return [encode_message("hello", {
                    "protocol": PROTOCOL_VERSION,
                    "scene": {
                        "particle_count": int(self.scene.n),
                        "bounds": {
                            "min": pos.min(axis=0).tolist() if self.scene.n else [0, 0, 0],
                            "max": pos.max(axis=0).tolist() if self.scene.n else [0, 0, 0],
                        },
                        "cluster_count": int(mat.cluster_count),
                        "domain": [DOMAIN_MIN, DOMAIN_MAX],
                    },
                    "camera": {"width": self.camera.width,
                               "height": self.camera.height,
                               "fx": self.camera.fx, "fy": self.camera.fy,
                               "cx": self.camera.cx, "cy": self.camera.cy},
                    "defaults": {"fps": self.fps,
                                 "drive_radius": self.config.effective_drive_radius,
                                 "dt": self.config.dt,
                                 "frame_dt": self.config.frame_dt},
                    "status": self.status,
                })]
        if kind == "start":
            with self.lock:
                self.status = "running"
                self.error = None
            return [encode_message("ok", {"for": "start", "status": "running"})]
        if kind == "pause":
            with self.lock:
                self.status = "paused"
            return [encode_message("ok", {"for": "pause", "status": "paused"})]
        if kind == "reset":
            with self.lock:
                self.scene = self.initial.copy()
                self._snapshot = self.scene.copy()
                self._render_cache = None
                self.sim_time = 0.0
                self.drags.clear()
            return [encode_message("ok", {"for": "reset", "sim_time": 0.0})]
        if kind == "set_params":
            return [self._set_params(body)]
        if kind == "drag_start":
            return [self._drag_start(body)]
        if kind == "drag_move":
            return [self._drag_move(body)]
        if kind == "drag_end":
            drag_id = int(body["drag_id"])
            with self.lock:
                if drag_id not in self.drags:
                    raise KeyError(f"unknown drag_id {drag_id}")
                del self.drags[drag_id]
            return [encode_message("ok", {"for": "drag_end", "drag_id": drag_id})]
        raise ValueError(f"unknown message kind {kind!r}")

    def _set_params(self, body: dict) -> str:
        cid = int(body["cluster_id"])
        with self.lock:
            mat = self.scene.material
            if not (0 <= cid < mat.cluster_count):
                raise ValueError(f"cluster_id {cid} out of range")
            updates = {}
            for name in PARAM_NAMES:
                if name in body:
                    val = float(body[name])
                    lo, hi = self.bounds[name]
                    if not (lo <= val <= hi):
                        raise ValueError(
                            f"{name} = {val} outside bounds [{lo}, {hi}]")
                    updates[name] = val
            if not updates:
                raise ValueError("set_params carries no parameter")
            sel = mat.cluster_id == cid
            for name, val in updates.items():
                getattr(mat, name)[sel] = val
                if name == "mu_E":
                    mat.lam_E[sel] = lam_from_mu(val, 0.45)
            # the initial snapshot keeps its own material (reset restores it)
        return encode_message("ok", {"for": "set_params", "cluster_id": cid,
                                     "applied": sorted(updates)})

    def _drag_start(self, body: dict) -> str:
        px = float(body["x"])
        py = float(body["y"])
        radius = float(body.get("radius", self.config.effective_drive_radius))
        res, _, _ = self.render_current()
        ix = int(np.clip(px, 0, self.camera.width - 1))
        iy = int(np.clip(py, 0, self.camera.height - 1))
        depth = float(res.depth[iy, ix])
        if depth <= 0.0:
            raise ValueError("no tissue under cursor")
        point = unproject_pixel(self.camera, px + 0.5, py + 0.5, depth)
        with self.lock:
            try:
                tagged = select_region(self.scene, point, radius)
            except SceneError as exc:
                raise ValueError(str(exc))
            drag_id = self._next_drag_id
            self._next_drag_id += 1
            self.drags[drag_id] = _Drag(drag_id, tagged, point, depth)
        return encode_message("ok", {"for": "drag_start", "drag_id": drag_id,
                                     "tagged": int(tagged.shape[0]),
                                     "point": point.tolist()})

    def _drag_move(self, body: dict) -> str:
        drag_id = int(body["drag_id"])
        px = float(body["x"])
        py = float(body["y"])
        now = time.monotonic()
        with self.lock:
            if drag_id not in self.drags:
                raise KeyError(f"unknown drag_id {drag_id}")
            drag = self.drags[drag_id]
            wall_dt = min(max(now - drag.last_wall, DT_CLAMP[0]), DT_CLAMP[1])
            drag.last_wall = now
            target = unproject_pixel(self.camera, px + 0.5, py + 0.5, drag.depth)
            drag.velocity = (target - drag.point) / wall_dt
            drag.budget = wall_dt
            drag.point = target
            speed = float(np.linalg.norm(drag.velocity))
        return encode_message("ok", {"for": "drag_move", "drag_id": drag_id,
                                     "speed": speed})


def create_app(session_factory):
    """FastAPI app exposing /session (websocket) and optional static assets.

    session_factory() must return a fresh Session per connection so parallel
    sessions stay isolated.
    """
    import asyncio

    from fastapi import FastAPI, WebSocket, WebSocketDisconnect

    app = FastAPI(title="splatsim session host")

    @app.websocket("/session")
    async def session_ws(ws: WebSocket):
        await ws.accept()
        session: Session = session_factory()
        session.start_worker()
        send_lock = asyncio.Lock()

        async def stream():
            interval = 1.0 / session.fps
            try:
                while True:
                    t0 = time.monotonic()
                    if session.status == "running":
                        msg = await asyncio.to_thread(session.frame_message)
                        async with send_lock:
                            await ws.send_text(msg)
                        if session.error:
                            async with send_lock:
                                await ws.send_text(encode_message(
                                    "event", {"kind": "paused",
                                              "message": session.error}))
                            session.error = None
                    rest = interval - (time.monotonic() - t0)
                    await asyncio.sleep(max(rest, 0.0))
            except Exception:
                return

        streamer = asyncio.create_task(stream())
        try:
            while True:
                record = await ws.receive_text()
                replies = await asyncio.to_thread(session.handle_record, record)
                async with send_lock:
                    for r in replies:
                        await ws.send_text(r)
        except WebSocketDisconnect:
            pass
        finally:
            streamer.cancel()
            session.stop_worker()

    return app
