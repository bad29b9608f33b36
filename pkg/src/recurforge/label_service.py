"""Local HTTP service for the human threshold-calibration workflow.

Serves sampled graph edges as pair cards, persists match/no-match labels to
an append-only JSONL log (replayed on startup, so a crash after ack never
loses a label), and recomputes the precision curve from the completed
labels on demand. One labeler per session; all mutations serialize through
a single lock.
"""

from __future__ import annotations

import io
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import PairLabel, default_thresholds, precision_curve
from .errors import ValidationError
from .feature_store import ObjectRecord
from .graph import KnnGraph

DEFAULT_SAMPLE_N = 1000
DEFAULT_RANGE = (0.85, 1.0)


@dataclass(frozen=True)
class PairCard:
    pair_id: str
    id_a: int
    id_b: int
    similarity: float

    def as_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "a": self.id_a,
            "b": self.id_b,
            "similarity": self.similarity,
            "crop_a": f"/crops/{self.pair_id}/a.png",
            "crop_b": f"/crops/{self.pair_id}/b.png",
        }


@dataclass
class LabelSession:
    """Sampled pair queue plus append-only labels; state lives in state_dir."""

    session_id: str
    n: int
    seed: int
    range_lo: float
    range_hi: float
    pairs: list[PairCard]
    state_dir: Path
    labels: dict[str, bool] = field(default_factory=dict)
    threshold: float | None = None

    @property
    def labels_path(self) -> Path:
        return self.state_dir / "labels.jsonl"

    @property
    def session_path(self) -> Path:
        return self.state_dir / "session.json"

    def pending(self) -> list[PairCard]:
        return [p for p in self.pairs if p.pair_id not in self.labels]

    def next_pair(self) -> PairCard | None:
        queue = self.pending()
        return queue[0] if queue else None

    def pair_by_id(self, pair_id: str) -> PairCard | None:
        for p in self.pairs:
            if p.pair_id == pair_id:
                return p
        return None

    def completed_labels(self) -> list[PairLabel]:
        out = []
        for p in self.pairs:
            if p.pair_id in self.labels:
                out.append(
                    PairLabel(
                        id_a=p.id_a,
                        id_b=p.id_b,
                        similarity=p.similarity,
                        match=self.labels[p.pair_id],
                    )
                )
        return out

    def submit(self, pair_id: str, match: bool) -> None:
        """Append one label durably; re-labeling a pair is a conflict."""
        if pair_id in self.labels:
            raise ConflictError(f"pair {pair_id} already labeled")
        card = self.pair_by_id(pair_id)
        if card is None:
            raise KeyError(pair_id)
        line = json.dumps(
            {
                "pair_id": pair_id,
                "a": card.id_a,
                "b": card.id_b,
                "similarity": card.similarity,
                "match": bool(match),
                "source": "human",
            },
            separators=(",", ":"),
        )
        with open(self.labels_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.labels[pair_id] = bool(match)

    def set_threshold(self, value: float) -> None:
        if not -1.0 <= value <= 1.0:
            raise ValidationError(f"threshold {value} outside [-1, 1]")
        self.threshold = float(value)
        self._write_session_file()

    def _write_session_file(self) -> None:
        doc = {
            "session_id": self.session_id,
            "n": self.n,
            "seed": self.seed,
            "range": [self.range_lo, self.range_hi],
            "threshold": self.threshold,
            "pairs": [
                {"pair_id": p.pair_id, "a": p.id_a, "b": p.id_b, "similarity": p.similarity}
                for p in self.pairs
            ],
        }
        tmp = self.session_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
            fh.write("\n")
        os.replace(tmp, self.session_path)

    def stats(self) -> dict:
        labeled = len(self.labels)
        matches = sum(1 for v in self.labels.values() if v)
        return {
            "session_id": self.session_id,
            "total": len(self.pairs),
            "labeled": labeled,
            "remaining": len(self.pairs) - labeled,
            "matches": matches,
            "non_matches": labeled - matches,
            "threshold": self.threshold,
        }


class ConflictError(ValidationError):
    """A label for this pair already exists (the log is append-only)."""


def create_session(
    graph: KnnGraph,
    n: int = DEFAULT_SAMPLE_N,
    seed: int = 0,
    range_lo: float = DEFAULT_RANGE[0],
    range_hi: float = DEFAULT_RANGE[1],
    session_id: str = "default",
    state_dir=None,
) -> LabelSession:
    """Sample n edges uniformly without replacement from the graph edges
    whose similarity lies in [range_lo, range_hi]; deterministic per seed.
    Queue order is the sampling order."""
    edges = [
        (a, b, sim)
        for a, b, sim in graph.iter_edges()
        if range_lo <= sim <= range_hi
    ]
    if len(edges) < n:
        raise ValidationError(
            f"only {len(edges)} eligible edges in range "
            f"[{range_lo}, {range_hi}], need {n}"
        )
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(edges), size=n, replace=False)
    pairs = [
        PairCard(pair_id=f"p{edges[i][0]}_{edges[i][1]}", id_a=edges[i][0], id_b=edges[i][1], similarity=edges[i][2])
        for i in picks
    ]
    state_dir = Path(state_dir) if state_dir is not None else Path(f"label-{session_id}")
    state_dir.mkdir(parents=True, exist_ok=True)
    session = LabelSession(
        session_id=session_id,
        n=n,
        seed=seed,
        range_lo=range_lo,
        range_hi=range_hi,
        pairs=pairs,
        state_dir=state_dir,
    )
    session._write_session_file()
    session.labels_path.touch()
    return session


def load_session(state_dir) -> LabelSession:
    """Rebuild a session from session.json plus a replay of labels.jsonl."""
    state_dir = Path(state_dir)
    with open(state_dir / "session.json", "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    pairs = [
        PairCard(p["pair_id"], int(p["a"]), int(p["b"]), float(p["similarity"]))
        for p in doc["pairs"]
    ]
    session = LabelSession(
        session_id=doc["session_id"],
        n=int(doc["n"]),
        seed=int(doc["seed"]),
        range_lo=float(doc["range"][0]),
        range_hi=float(doc["range"][1]),
        pairs=pairs,
        state_dir=state_dir,
        threshold=doc.get("threshold"),
    )
    labels_path = session.labels_path
    if labels_path.exists():
        with open(labels_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                session.labels[str(obj["pair_id"])] = bool(obj["match"])
    return session


def live_precision(session: LabelSession, thresholds=None):
    """Precision curve over the session's completed labels (same code path
    as the offline analysis)."""
    labels = session.completed_labels()
    if not labels:
        raise ValidationError("no completed labels yet")
    return precision_curve(labels, thresholds)


def build_app(
    sessions: dict[str, LabelSession],
    records: list[ObjectRecord] | None = None,
    corpus_root=None,
    ui_dir=None,
):
    """FastAPI app over one or more sessions.

    records and corpus_root enable /crops rendering; ui_dir, when given, is
    served at / for the browser frontend.
    """
    from fastapi import Body, FastAPI, HTTPException
    from fastapi.responses import FileResponse, Response

    app = FastAPI(title="recurforge label service")
    lock = threading.Lock()
    by_id = {r.id: r for r in records} if records else {}
    corpus_root = Path(corpus_root) if corpus_root is not None else Path(".")

    def get_session(session_id: str) -> LabelSession:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    @app.get("/api/sessions")
    def list_sessions():
        return [s.stats() for s in sessions.values()]

    @app.get("/api/session/{session_id}/next")
    def next_pair(session_id: str):
        session = get_session(session_id)
        with lock:
            card = session.next_pair()
            if card is None:
                return {"done": True, "total": len(session.pairs), "labeled": len(session.labels)}
            return {
                "done": False,
                **card.as_dict(),
                "labeled": len(session.labels),
                "total": len(session.pairs),
            }

    @app.post("/api/session/{session_id}/label")
    def submit_label(session_id: str, body: dict = Body(...)):
        session = get_session(session_id)
        pair_id = body.get("pair_id")
        match = body.get("match")
        if not isinstance(pair_id, str) or not isinstance(match, bool):
            raise HTTPException(status_code=400, detail="body needs pair_id: str and match: bool")
        with lock:
            try:
                session.submit(pair_id, match)
            except ConflictError as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            except KeyError:
                raise HTTPException(status_code=404, detail=f"unknown pair {pair_id}")
            return {"ok": True, "labeled": len(session.labels)}

    @app.get("/api/session/{session_id}/precision")
    def precision(session_id: str, step: float = 0.005, lo: float = 0.85, hi: float = 1.0):
        session = get_session(session_id)
        with lock:
            try:
                curve = live_precision(session, default_thresholds(lo, hi, step))
            except ValidationError as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            return curve.as_dict()

    @app.post("/api/session/{session_id}/threshold")
    def set_threshold(session_id: str, body: dict = Body(...)):
        session = get_session(session_id)
        value = body.get("value")
        if not isinstance(value, (int, float)):
            raise HTTPException(status_code=400, detail="body needs value: number")
        with lock:
            try:
                session.set_threshold(float(value))
            except ValidationError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            return {"ok": True, "threshold": session.threshold}

    @app.get("/api/session/{session_id}/stats")
    def stats(session_id: str):
        session = get_session(session_id)
        with lock:
            return session.stats()

    @app.get("/api/session/{session_id}/labels")
    def export_labels(session_id: str):
        session = get_session(session_id)
        return FileResponse(
            session.labels_path,
            media_type="application/jsonl",
            filename="labels.jsonl",
        )

    @app.get("/crops/{pair_id}/{side}.png")
    def crop(pair_id: str, side: str):
        if side not in ("a", "b"):
            raise HTTPException(status_code=404, detail="side must be a or b")
        card = None
        for session in sessions.values():
            card = session.pair_by_id(pair_id)
            if card is not None:
                break
        if card is None:
            raise HTTPException(status_code=404, detail=f"unknown pair {pair_id}")
        object_id = card.id_a if side == "a" else card.id_b
        record = by_id.get(object_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"no record for object {object_id}")
        image_path = corpus_root / record.image_ref
        if not image_path.exists():
            raise HTTPException(status_code=404, detail=f"image not found: {image_path}")
        from PIL import Image

        from .eval_protocol import crop_to_bbox

        with Image.open(image_path) as im:
            cropped = crop_to_bbox(np.asarray(im.convert("RGB")), record.bbox)
        buf = io.BytesIO()
        Image.fromarray(cropped).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
