"""HTTP service exposing query batches to the annotation UI.

All state lives in a state directory so a restarted service resumes the
same pending batch. Label submissions are run-length encoded over the
slice in row-major order as (start_offset, length, class_id) triples in
a YAML body, validated against the query mask, and persisted before they
are acknowledged.
"""

from __future__ import annotations

import io
import os
import time

import numpy as np
import yaml
from fastapi import FastAPI, Request, Response
from PIL import Image

from .active import QueryBatch
from .core import _LABEL_COLORS, _atomic_write_text

SESSION_FILE = "session.yaml"


class ServiceStateError(Exception):
    pass


def encode_labels(labels: np.ndarray, mask: np.ndarray) -> list[list[int]]:
    """Run-length encode labels over the masked pixels in row-major order."""
    flat_lab = np.asarray(labels).ravel()
    flat_mask = np.asarray(mask, dtype=bool).ravel()
    runs = []
    idx = np.flatnonzero(flat_mask)
    for i in idx:
        v = int(flat_lab[i])
        if runs and runs[-1][0] + runs[-1][1] == i and runs[-1][2] == v:
            runs[-1][1] += 1
        else:
            runs.append([int(i), 1, v])
    return runs


def decode_labels(runs, shape) -> tuple[np.ndarray, np.ndarray]:
    """Decode RLE runs into (labels, covered-mask) arrays of the slice shape."""
    size = int(np.prod(shape))
    labels = np.zeros(size, dtype=np.uint8)
    covered = np.zeros(size, dtype=bool)
    for run in runs:
        if len(run) != 3:
            raise ValueError(f"malformed run {run!r}")
        start, length, cls = (int(v) for v in run)
        if length < 1 or start < 0 or start + length > size or cls < 0:
            raise ValueError(f"run out of bounds: {run!r}")
        if covered[start:start + length].any():
            raise ValueError(f"overlapping run: {run!r}")
        labels[start:start + length] = cls
        covered[start:start + length] = True
    return labels.reshape(shape), covered.reshape(shape)


def _item_path(state_dir, item_id, suffix):
    return os.path.join(state_dir, f"item_{item_id}_{suffix}")


def publish_batch(
    state_dir: str,
    batch: QueryBatch,
    images: dict,
    n_classes: int,
    step_index: int,
) -> None:
    """Write a pending query batch into the state directory.

    images: (case_id, z) -> normalized uint8 slice.
    """
    os.makedirs(state_dir, exist_ok=True)
    items = []
    for i, item in enumerate(batch.items):
        item_id = f"{step_index:03d}_{i:03d}"
        img = np.asarray(images[(item.case_id, item.z_index)], dtype=np.uint8)
        np.save(_item_path(state_dir, item_id, "image.npy"), img)
        np.save(_item_path(state_dir, item_id, "mask.npy"), item.query_mask)
        np.save(_item_path(state_dir, item_id, "prediction.npy"),
                item.predicted_labels)
        np.save(_item_path(state_dir, item_id, "variance.npy"),
                item.summed_variance.astype(np.float32))
        items.append({
            "item_id": item_id,
            "case_id": item.case_id,
            "z_index": int(item.z_index),
            "shape": [int(s) for s in item.query_mask.shape],
            "queried_pixels": int(item.query_mask.sum()),
            "status": "pending",
        })
    session = {
        "session_id": f"step-{step_index:03d}",
        "step_index": int(step_index),
        "n_classes": int(n_classes),
        "items": items,
    }
    _atomic_write_text(os.path.join(state_dir, SESSION_FILE),
                       yaml.safe_dump(session, sort_keys=False))


def load_session(state_dir: str) -> dict:
    path = os.path.join(state_dir, SESSION_FILE)
    if not os.path.exists(path):
        raise ServiceStateError(f"no session in {state_dir}")
    with open(path) as f:
        return yaml.safe_load(f)


def _save_session(state_dir: str, session: dict) -> None:
    _atomic_write_text(os.path.join(state_dir, SESSION_FILE),
                       yaml.safe_dump(session, sort_keys=False))


def batch_complete(state_dir: str) -> bool:
    session = load_session(state_dir)
    return all(it["status"] == "submitted" for it in session["items"])


def collect_labels(state_dir: str) -> dict:
    """Item id -> (labels, covered) decoded from persisted submissions."""
    session = load_session(state_dir)
    out = {}
    for it in session["items"]:
        if it["status"] != "submitted":
            continue
        with open(_item_path(state_dir, it["item_id"], "labels.yaml")) as f:
            doc = yaml.safe_load(f)
        out[it["item_id"]] = decode_labels(doc["pixels"], tuple(it["shape"]))
    return out


def wait_for_batch(state_dir: str, poll_interval: float = 0.5,
                   timeout: float | None = None) -> dict:
    """Block until every item of the pending batch is submitted."""
    start = time.monotonic()
    while not batch_complete(state_dir):
        if timeout is not None and time.monotonic() - start > timeout:
            raise TimeoutError("annotation batch not completed in time")
        time.sleep(poll_interval)
    return collect_labels(state_dir)


def _png_bytes(array: np.ndarray, mode: str) -> bytes:
    if mode == "P":
        img = Image.fromarray(array.astype(np.uint8), mode="P")
        palette = []
        for i in range(256):
            palette.extend(_LABEL_COLORS[i % len(_LABEL_COLORS)] if i else (0, 0, 0))
        img.putpalette(palette)
    else:
        img = Image.fromarray(array.astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(state_dir: str) -> FastAPI:
    app = FastAPI(title="bayesseg annotation service")

    def session():
        return load_session(state_dir)

    def find_item(sess, item_id):
        for it in sess["items"]:
            if it["item_id"] == item_id:
                return it
        return None

    def yaml_response(doc, status_code=200):
        return Response(content=yaml.safe_dump(doc, sort_keys=False),
                        media_type="text/yaml", status_code=status_code)

    @app.get("/api/session")
    def get_session():
        sess = session()
        return yaml_response({
            "session_id": sess["session_id"],
            "step_index": sess["step_index"],
            "n_classes": sess["n_classes"],
            "items": sess["items"],
        })

    @app.get("/api/queries")
    def get_queries():
        sess = session()
        pending = [it for it in sess["items"] if it["status"] == "pending"]
        if not pending:
            return Response(status_code=204)
        return yaml_response({"items": pending})

    @app.get("/api/item/{item_id}/image")
    def get_image(item_id: str):
        sess = session()
        if find_item(sess, item_id) is None:
            return yaml_response({"error": "unknown item"}, 404)
        img = np.load(_item_path(state_dir, item_id, "image.npy"))
        return Response(content=_png_bytes(img, "L"), media_type="image/png")

    @app.get("/api/item/{item_id}/prediction")
    def get_prediction(item_id: str):
        sess = session()
        it = find_item(sess, item_id)
        if it is None:
            return yaml_response({"error": "unknown item"}, 404)
        pred = np.load(_item_path(state_dir, item_id, "prediction.npy"))
        runs = encode_labels(pred, np.ones_like(pred, dtype=bool))
        return yaml_response({"shape": it["shape"], "pixels": runs})

    @app.get("/api/item/{item_id}/query-mask")
    def get_query_mask(item_id: str):
        sess = session()
        it = find_item(sess, item_id)
        if it is None:
            return yaml_response({"error": "unknown item"}, 404)
        mask = np.load(_item_path(state_dir, item_id, "mask.npy"))
        runs = encode_labels(mask.astype(np.uint8), mask)
        return yaml_response({"shape": it["shape"], "pixels": runs})

    @app.get("/api/item/{item_id}/uncertainty")
    def get_uncertainty(item_id: str, format: str = "png"):
        sess = session()
        it = find_item(sess, item_id)
        if it is None:
            return yaml_response({"error": "unknown item"}, 404)
        var = np.load(_item_path(state_dir, item_id, "variance.npy"))
        if format == "raw":
            payload = var.astype("<f4").tobytes()
            return Response(content=payload,
                            media_type="application/octet-stream",
                            headers={"X-Shape": ",".join(map(str, var.shape))})
        vmax = float(var.max()) or 1.0
        heat = np.clip(var / vmax * 255.0, 0, 255).astype(np.uint8)
        return Response(content=_png_bytes(heat, "L"), media_type="image/png")

    @app.get("/api/item/{item_id}/labels")
    def get_labels(item_id: str):
        sess = session()
        it = find_item(sess, item_id)
        if it is None:
            return yaml_response({"error": "unknown item"}, 404)
        if it["status"] != "submitted":
            return yaml_response({"error": "not submitted"}, 404)
        with open(_item_path(state_dir, item_id, "labels.yaml")) as f:
            return yaml_response(yaml.safe_load(f))

    @app.post("/api/item/{item_id}/labels")
    async def post_labels(item_id: str, request: Request):
        sess = session()
        it = find_item(sess, item_id)
        if it is None:
            return yaml_response({"error": "unknown item"}, 404)
        if it["status"] == "submitted":
            return yaml_response({"error": "already submitted"}, 409)
        body = (await request.body()).decode("utf-8")
        try:
            doc = yaml.safe_load(body)
            runs = doc["pixels"]
            labels, covered = decode_labels(runs, tuple(it["shape"]))
        except Exception as e:
            return yaml_response({"error": f"malformed submission: {e}"}, 422)
        mask = np.load(_item_path(state_dir, item_id, "mask.npy"))
        if (covered & ~mask).any():
            return yaml_response(
                {"error": "labels touch non-queried pixels"}, 422)
        if (mask & ~covered).any():
            return yaml_response(
                {"error": "queried pixels left unlabeled"}, 422)
        if labels[covered].size and int(labels[covered].max()) >= sess["n_classes"]:
            return yaml_response({"error": "class id out of range"}, 422)
        # Persist before acknowledging.
        _atomic_write_text(
            _item_path(state_dir, item_id, "labels.yaml"),
            yaml.safe_dump({"shape": it["shape"], "pixels": runs},
                           sort_keys=False),
        )
        it["status"] = "submitted"
        _save_session(state_dir, sess)
        return yaml_response({"status": "submitted", "item_id": item_id})

    @app.post("/api/step/complete")
    def step_complete():
        sess = session()
        if any(it["status"] != "submitted" for it in sess["items"]):
            return yaml_response({"error": "items still pending"}, 409)
        sess["completed"] = True
        _save_session(state_dir, sess)
        return yaml_response({"status": "complete"})

    return app


def serve_annotation(state_dir: str, port: int = 8008, host: str = "127.0.0.1"):
    """Run the annotation service (blocking)."""
    import uvicorn

    uvicorn.run(create_app(state_dir), host=host, port=port, log_level="warning")


def annotate_via_service(state_dir: str, batch: QueryBatch, images: dict,
                         n_classes: int, step_index: int,
                         poll_interval: float = 0.5,
                         timeout: float | None = None):
    """Publish a batch, block until humans submit, and return per-item
    manual label arrays in batch order."""
    publish_batch(state_dir, batch, images, n_classes, step_index)
    collected = wait_for_batch(state_dir, poll_interval, timeout)
    out = []
    for i, item in enumerate(batch.items):
        item_id = f"{step_index:03d}_{i:03d}"
        labels, _ = collected[item_id]
        out.append(labels)
    return out
