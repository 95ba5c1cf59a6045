"""Synthetic rooms with template question answering, manifests and ingestion.

Spatial convention: the viewer stands at -y looking toward +y, so "left" is
smaller x, "right" larger x, "in front of" smaller y and "behind" larger y.
The room spans [0, width] x [0, depth] on the floor plane z = 0.
"""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .pointcloud import AxisAlignedBox, PointCloud
from .pointio import read_cloud, write_ply

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
TASKS = ("qa", "dense_caption", "scene_caption", "dialogue")
CONVENTION = "viewer at -y looking +y; left=-x, right=+x, front=-y, behind=+y"
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")
CORNERS = {"front left": (0, 0), "front right": (1, 0), "back left": (0, 1), "back right": (1, 1)}


class DataError(ValueError):
    """Invalid dataset input: bad palette, schema violation, unreadable file."""


@dataclass(frozen=True)
class Category:
    name: str
    plural: str
    half_extent: tuple[float, float, float]


@dataclass(frozen=True)
class ColorName:
    name: str
    rgb: tuple[float, float, float]


DEFAULT_CATEGORIES = (
    Category("chair", "chairs", (0.25, 0.25, 0.45)),
    Category("table", "tables", (0.55, 0.4, 0.38)),
    Category("sofa", "sofas", (0.9, 0.4, 0.4)),
    Category("bed", "beds", (1.0, 0.8, 0.3)),
    Category("cabinet", "cabinets", (0.4, 0.25, 0.8)),
    Category("lamp", "lamps", (0.15, 0.15, 0.7)),
)
DEFAULT_COLORS = (
    ColorName("red", (0.85, 0.1, 0.1)),
    ColorName("green", (0.1, 0.7, 0.2)),
    ColorName("blue", (0.1, 0.2, 0.85)),
    ColorName("yellow", (0.9, 0.85, 0.1)),
    ColorName("white", (0.95, 0.95, 0.95)),
    ColorName("black", (0.05, 0.05, 0.05)),
)


@dataclass(frozen=True)
class SceneConfig:
    room_min: tuple[float, float] = (4.0, 4.0)
    room_max: tuple[float, float] = (6.0, 6.0)
    min_objects: int = 2
    max_objects: int = 4
    categories: tuple[Category, ...] = DEFAULT_CATEGORIES
    colors: tuple[ColorName, ...] = DEFAULT_COLORS
    n_points: int = 4096
    floor_fraction: float = 0.3
    jitter: float = 0.005
    size_variation: float = 0.2
    gap: float = 0.1
    max_retries: int = 200

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise DataError(f"object count range [{self.min_objects}, {self.max_objects}] is invalid")
        if not self.categories or not self.colors:
            raise DataError("palettes must be non-empty")
        if len({c.name for c in self.categories}) != len(self.categories):
            raise DataError("category names must be unique")
        if len({c.name for c in self.colors}) != len(self.colors):
            raise DataError("color names must be unique")
        if self.n_points < 16:
            raise DataError("n_points must be >= 16")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> SceneConfig:
        raw = dict(raw)
        if "categories" in raw:
            raw["categories"] = tuple(Category(c["name"], c["plural"], tuple(c["half_extent"])) for c in raw["categories"])
        if "colors" in raw:
            raw["colors"] = tuple(ColorName(c["name"], tuple(c["rgb"])) for c in raw["colors"])
        for key in ("room_min", "room_max"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def load_palette(path: str | Path) -> tuple[tuple[Category, ...], tuple[ColorName, ...]]:
    """Read a palette JSON file ``{"categories": [...], "colors": [...]}``."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"palette {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError("palette: top level must be an object")
    cats, cols = [], []
    for i, c in enumerate(raw.get("categories", [])):
        for key in ("name", "plural", "half_extent"):
            if key not in c:
                raise DataError(f"palette.categories[{i}].{key}: missing")
        he = c["half_extent"]
        if not (isinstance(he, list) and len(he) == 3 and all(isinstance(v, (int, float)) and v > 0 for v in he)):
            raise DataError(f"palette.categories[{i}].half_extent: expected three positive numbers")
        cats.append(Category(str(c["name"]), str(c["plural"]), tuple(float(v) for v in he)))
    for i, c in enumerate(raw.get("colors", [])):
        for key in ("name", "rgb"):
            if key not in c:
                raise DataError(f"palette.colors[{i}].{key}: missing")
        rgb = c["rgb"]
        if not (isinstance(rgb, list) and len(rgb) == 3 and all(isinstance(v, (int, float)) and 0 <= v <= 1 for v in rgb)):
            raise DataError(f"palette.colors[{i}].rgb: expected three numbers in [0, 1]")
        cols.append(ColorName(str(c["name"]), tuple(float(v) for v in rgb)))
    if not cats:
        raise DataError("palette.categories: at least one category required")
    if not cols:
        raise DataError("palette.colors: at least one color required")
    return tuple(cats), tuple(cols)


# --------------------------------------------------------------------- seeds
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    z = (state + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def scene_seed(base_seed: int, index: int) -> int:
    """Seed of scene ``index``: output ``index`` of the splitmix64 stream started at ``base_seed``."""
    return splitmix64((base_seed + index * _GOLDEN) & _MASK64)


# -------------------------------------------------------------------- scenes
@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    center: tuple[float, float, float]
    half_extent: tuple[float, float, float]

    def to_box(self, categories: Sequence[str], colors: Sequence[str]) -> AxisAlignedBox:
        return AxisAlignedBox(self.center, self.half_extent,
                              categories.index(self.category) if self.category in categories else -1,
                              colors.index(self.color) if self.color in colors else -1)


@dataclass(frozen=True)
class QAItem:
    id: str
    instruction: str
    answer: str
    task: str
    references: tuple[str, ...] = ()

    def refs(self) -> list[str]:
        return list(self.references) if self.references else [self.answer]


@dataclass
class SceneSample:
    scene_id: str
    cloud: PointCloud | None
    objects: list[SceneObject]
    qa: list[QAItem]
    room: tuple[float, float] = (0.0, 0.0)
    cloud_path: str | None = None
    flags: list[str] = field(default_factory=list)

    def boxes(self, categories: Sequence[str] = (), colors: Sequence[str] = ()) -> list[AxisAlignedBox]:
        return [o.to_box(list(categories), list(colors)) for o in self.objects]


def _overlaps(a_c, a_h, b_c, b_h, gap) -> bool:
    return all(abs(a_c[i] - b_c[i]) < a_h[i] + b_h[i] + gap for i in range(2))


def _surface_points(center, half, count, rng) -> np.ndarray:
    """Uniform samples on the four sides and the top of a box."""
    hx, hy, hz = half
    faces = [  # (area, axis fixed, sign)
        (4 * hy * hz, 0, -1), (4 * hy * hz, 0, 1),
        (4 * hx * hz, 1, -1), (4 * hx * hz, 1, 1),
        (4 * hx * hy, 2, 1),
    ]
    areas = np.array([f[0] for f in faces])
    which = rng.choice(len(faces), size=count, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(count, 3)) * np.asarray(half)
    for k, (_, axis, sign) in enumerate(faces):
        sel = which == k
        uv[sel, axis] = sign * half[axis]
    return uv + np.asarray(center)


def place_objects(cfg: SceneConfig, rng: np.random.Generator, room: tuple[float, float]) -> tuple[list[SceneObject], list[str]]:
    flags: list[str] = []
    target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[SceneObject] = []
    retries = 0
    while len(objects) < target and retries < cfg.max_retries:
        cat = cfg.categories[int(rng.integers(len(cfg.categories)))]
        color = cfg.colors[int(rng.integers(len(cfg.colors)))]
        scale = 1.0 + rng.uniform(-cfg.size_variation, cfg.size_variation, size=3)
        half = tuple(float(v) for v in np.asarray(cat.half_extent) * scale)
        if 2 * half[0] + 2 * cfg.gap > room[0] or 2 * half[1] + 2 * cfg.gap > room[1]:
            retries += 1
            continue
        cx = float(rng.uniform(half[0] + cfg.gap, room[0] - half[0] - cfg.gap))
        cy = float(rng.uniform(half[1] + cfg.gap, room[1] - half[1] - cfg.gap))
        center = (cx, cy, half[2])
        if any(_overlaps(center, half, o.center, o.half_extent, cfg.gap) for o in objects):
            retries += 1
            continue
        objects.append(SceneObject(cat.name, color.name, center, half))
    if len(objects) < target:
        flags.append(f"reduced_object_count:{target}->{len(objects)}")
    if not objects:
        raise DataError("could not place any object; room too small for the palette")
    return objects, flags


def rasterize(cfg: SceneConfig, objects: Sequence[SceneObject], room: tuple[float, float],
              rng: np.random.Generator) -> PointCloud:
    colors = {c.name: c.rgb for c in cfg.colors}
    n_floor = int(round(cfg.floor_fraction * cfg.n_points))
    n_obj = cfg.n_points - n_floor
    areas = np.array([2 * (4 * h[1] * h[2] + 4 * h[0] * h[2]) + 4 * h[0] * h[1] for h in (o.half_extent for o in objects)])
    counts = np.floor(n_obj * areas / areas.sum()).astype(int)
    counts[: n_obj - counts.sum()] += 1
    pts = [np.column_stack([rng.uniform(0, room[0], n_floor), rng.uniform(0, room[1], n_floor), np.zeros(n_floor)])]
    rgb = [np.tile([0.8, 0.75, 0.6], (n_floor, 1))]
    for obj, k in zip(objects, counts):
        pts.append(_surface_points(obj.center, obj.half_extent, int(k), rng))
        rgb.append(np.tile(colors[obj.color], (int(k), 1)))
    points = np.concatenate(pts) + rng.normal(0.0, cfg.jitter, size=(cfg.n_points, 3))
    cols = np.concatenate(rgb)
    order = rng.permutation(cfg.n_points)
    return PointCloud(points[order], np.clip(cols[order], 0.0, 1.0))


# ------------------------------------------------------------------ templates
def number_word(n: int) -> str:
    return NUMBER_WORDS[n] if 0 <= n < len(NUMBER_WORDS) else str(n)


def relation(a: SceneObject, b: SceneObject) -> str:
    """Where ``a`` is relative to ``b`` along the dominant floor axis."""
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "in front of" if dy < 0 else "behind"


def nearest_corner(obj: SceneObject, room: tuple[float, float]) -> str:
    best, best_d = "", np.inf
    for name, (ix, iy) in CORNERS.items():
        d = (obj.center[0] - ix * room[0]) ** 2 + (obj.center[1] - iy * room[1]) ** 2
        if d < best_d:
            best, best_d = name, d
    return best


def closest_to_corner(objects: Sequence[SceneObject], corner: str, room: tuple[float, float]) -> SceneObject | None:
    ix, iy = CORNERS[corner]
    d = [(o.center[0] - ix * room[0]) ** 2 + (o.center[1] - iy * room[1]) ** 2 for o in objects]
    order = np.argsort(d, kind="stable")
    if len(d) > 1 and d[order[1]] - d[order[0]] < 1e-9:
        return None
    return objects[int(order[0])]


def scene_caption(objects: Sequence[SceneObject], plurals: dict[str, str]) -> str:
    by_cat = Counter(o.category for o in objects)
    parts = []
    for cat in sorted(by_cat):
        if by_cat[cat] == 1:
            color = next(o.color for o in objects if o.category == cat)
            parts.append(f"a {color} {cat}")
        else:
            parts.append(f"{number_word(by_cat[cat])} {plurals[cat]}")
    listing = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    return f"the room contains {listing}."


def make_qa(scene_id: str, objects: Sequence[SceneObject], room: tuple[float, float], cfg: SceneConfig,
            rng: np.random.Generator) -> list[QAItem]:
    plurals = {c.name: c.plural for c in cfg.categories}
    counts = Counter(o.category for o in objects)
    present = sorted(counts)
    absent = sorted(set(plurals) - set(counts))
    unique = [o for o in objects if counts[o.category] == 1]
    items: list[tuple[str, str, str]] = []

    for cat in present:
        n = counts[cat]
        verb, noun = ("is", cat) if n == 1 else ("are", plurals[cat])
        items.append((f"how many {plurals[cat]} are there?", f"there {verb} {number_word(n)} {noun}.", "qa"))
    items.append((f"is there a {present[int(rng.integers(len(present)))]} in the room?", "yes.", "qa"))
    if absent:
        items.append((f"is there a {absent[int(rng.integers(len(absent)))]} in the room?", "no.", "qa"))
    for o in unique:
        items.append((f"what color is the {o.category}?", f"the {o.category} is {o.color}.", "qa"))
    for corner in CORNERS:
        hit = closest_to_corner(objects, corner, room)
        if hit is not None:
            items.append((f"what is closest to the {corner} corner of the room?", f"the {hit.category}.", "qa"))
    for a in unique:
        for b in unique:
            if a is not b:
                items.append((f"where is the {a.category} relative to the {b.category}?",
                              f"the {a.category} is {relation(a, b)} the {b.category}.", "qa"))
    for o in unique:
        items.append((f"describe the {o.category}.",
                      f"a {o.color} {o.category} near the {nearest_corner(o, room)} corner of the room.",
                      "dense_caption"))
    items.append(("describe the room.", scene_caption(objects, plurals), "scene_caption"))
    for o in unique:
        items.append((f"can you see a {o.category}?", f"yes, there is a {o.color} {o.category}.", "dialogue"))
    if absent:
        cat = absent[int(rng.integers(len(absent)))]
        items.append((f"can you see a {cat}?", f"no, there is no {cat}.", "dialogue"))
    return [QAItem(f"{scene_id}_q{k:02d}", q, a, t) for k, (q, a, t) in enumerate(items)]


def generate_scene(seed: int, config: SceneConfig | None = None, scene_id: str | None = None) -> SceneSample:
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    scene_id = scene_id or f"scene_{seed & 0xFFFFFFFF:08x}"
    room = tuple(float(v) for v in rng.uniform(cfg.room_min, cfg.room_max))
    objects, flags = place_objects(cfg, rng, room)
    cloud = rasterize(cfg, objects, room, rng)
    qa = make_qa(scene_id, objects, room, cfg, rng)
    return SceneSample(scene_id, cloud, objects, qa, room, flags=flags)


# ------------------------------------------------------------------ manifests
def sample_record(sample: SceneSample) -> dict:
    return {
        "type": "sample",
        "scene_id": sample.scene_id,
        "cloud": sample.cloud_path,
        "room": list(sample.room),
        "objects": [asdict(o) for o in sample.objects],
        "qa": [{"id": q.id, "instruction": q.instruction, "answer": q.answer, "task": q.task,
                "references": q.refs()} for q in sample.qa],
        "flags": sample.flags,
    }


def sample_from_record(rec: dict, index: int = 0) -> SceneSample:
    def need(obj, key, where):
        if key not in obj:
            raise DataError(f"record {index}: missing field {where}{key!r}")
        return obj[key]

    objects = []
    for j, o in enumerate(rec.get("objects", [])):
        objects.append(SceneObject(need(o, "category", f"objects[{j}]."), o.get("color", ""),
                                   tuple(need(o, "center", f"objects[{j}].")),
                                   tuple(need(o, "half_extent", f"objects[{j}]."))))
    qa = []
    for j, q in enumerate(need(rec, "qa", "")):
        task = q.get("task", "qa")
        if task not in TASKS:
            raise DataError(f"record {index}: qa[{j}].task {task!r} not in {TASKS}")
        refs = tuple(q.get("references") or [need(q, "answer", f"qa[{j}].")])
        qa.append(QAItem(need(q, "id", f"qa[{j}]."), need(q, "instruction", f"qa[{j}]."),
                         need(q, "answer", f"qa[{j}]."), task, refs))
    return SceneSample(need(rec, "scene_id", ""), None, objects, qa, tuple(rec.get("room", (0.0, 0.0))),
                       rec.get("cloud"), list(rec.get("flags", [])))


@dataclass
class DatasetManifest:
    split: str
    samples: list[SceneSample]
    seed: int | None = None
    config_hash: str | None = None
    version: int = MANIFEST_VERSION
    skipped: list[str] = field(default_factory=list)

    def header(self) -> dict:
        return {"type": "header", "version": self.version, "split": self.split, "seed": self.seed,
                "config_hash": self.config_hash, "convention": CONVENTION,
                "count": len(self.samples), "skipped": self.skipped}

    def qa_ids(self) -> list[str]:
        return [q.id for s in self.samples for q in s.qa]

    def write(self, path: str | Path) -> None:
        ids = self.qa_ids()
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate qa ids in split {self.split!r}")
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(sample_record(s), sort_keys=True) for s in self.samples]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> DatasetManifest:
        try:
            rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"manifest {path}: {exc}") from exc
        if not rows or rows[0].get("type") != "header":
            raise DataError(f"manifest {path}: first record must be the header")
        head = rows[0]
        samples = [sample_from_record(r, i) for i, r in enumerate(rows[1:])]
        return cls(head.get("split", ""), samples, head.get("seed"), head.get("config_hash"),
                   head.get("version", MANIFEST_VERSION), list(head.get("skipped", [])))


def load_clouds(manifest: DatasetManifest, root: str | Path) -> None:
    root = Path(root)
    for s in manifest.samples:
        if s.cloud is None and s.cloud_path:
            s.cloud = read_cloud(root / s.cloud_path)


def generate_dataset(root: str | Path, seed: int, n_scenes: int, config: SceneConfig | None = None,
                     val_fraction: float = 0.25) -> dict[str, DatasetManifest]:
    """Write ``clouds/*.ply`` and ``manifest_{train,val}.jsonl`` under ``root``."""
    cfg = config or SceneConfig()
    root = Path(root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(n_scenes):
        s = generate_scene(scene_seed(seed, i), cfg, scene_id=f"scene_{i:04d}")
        s.cloud_path = f"clouds/{s.scene_id}.ply"
        write_ply(root / s.cloud_path, s.cloud)
        samples.append(s)
    n_val = int(round(val_fraction * n_scenes)) if n_scenes > 1 else 0
    splits = {"train": samples[: n_scenes - n_val], "val": samples[n_scenes - n_val:]}
    out = {}
    for name, items in splits.items():
        m = DatasetManifest(name, items, seed, cfg.hash())
        m.write(root / f"manifest_{name}.jsonl")
        out[name] = m
    (root / "scene_config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    return out


# ------------------------------------------------------------------ ingestion
def ingest_scanqa(question_file: str | Path, annotation_file: str | Path | None,
                  cloud_dir: str | Path, split: str = "val") -> DatasetManifest:
    """Build a manifest from ScanQA-style records.

    ``question_file``: JSON list of ``{question_id, scene_id, question, answers[]}``.
    ``annotation_file``: optional JSON ``{scene_id: [{category, center, half_extent}]}``.
    Scenes whose ``<cloud_dir>/<scene_id>.ply`` (or ``.xyz``) is missing are skipped.
    """
    try:
        records = json.loads(Path(question_file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"question file {question_file}: {exc}") from exc
    if not isinstance(records, list):
        raise DataError("question file: top level must be a list of records")
    annotations = {}
    if annotation_file is not None:
        try:
            annotations = json.loads(Path(annotation_file).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"annotation file {annotation_file}: {exc}") from exc
    cloud_dir = Path(cloud_dir)
    by_scene: dict[str, list[QAItem]] = {}
    for i, rec in enumerate(records):
        for key, kind in (("question_id", (str, int)), ("scene_id", str), ("question", str), ("answers", list)):
            if key not in rec:
                raise DataError(f"record {i}: missing field {key!r}")
            if not isinstance(rec[key], kind):
                raise DataError(f"record {i}: field {key!r} has type {type(rec[key]).__name__}")
        if not rec["answers"] or not all(isinstance(a, str) for a in rec["answers"]):
            raise DataError(f"record {i}: field 'answers' must be a non-empty list of strings")
        item = QAItem(str(rec["question_id"]), rec["question"], rec["answers"][0], "qa", tuple(rec["answers"]))
        by_scene.setdefault(rec["scene_id"], []).append(item)
    if not records:
        log.warning("ingest_scanqa: question file %s has zero samples", question_file)
    samples, skipped = [], []
    for scene_id, qa in by_scene.items():
        path = next((p for p in (cloud_dir / f"{scene_id}.ply", cloud_dir / f"{scene_id}.xyz") if p.exists()), None)
        if path is None:
            skipped.append(scene_id)
            continue
        objects = []
        for j, a in enumerate(annotations.get(scene_id, [])):
            try:
                objects.append(SceneObject(str(a["category"]), str(a.get("color", "")),
                                           tuple(float(v) for v in a["center"]),
                                           tuple(float(v) for v in a["half_extent"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"annotation {scene_id}[{j}]: {exc}") from exc
        samples.append(SceneSample(scene_id, None, objects, qa, cloud_path=path.name))
    if skipped:
        log.warning("ingest_scanqa: skipped %d scene(s) without point clouds: %s", len(skipped), skipped)
    return DatasetManifest(split, samples, skipped=skipped)


# -------------------------------------------------------------------- stats
@dataclass
class TokenStats:
    question_lengths: list[int]
    answer_lengths: list[int]
    question_hist: dict[int, int]
    answer_hist: dict[int, int]
    frac_questions_lt16: float
    frac_answers_gt7: float
    task_distribution: dict[str, float]

    def to_dict(self) -> dict:
        return asdict(self)


def token_stats(manifest: DatasetManifest, tokenizer: Callable[[str], Sequence[str]]) -> TokenStats:
    qa = [q for s in manifest.samples for q in s.qa]
    if not qa:
        raise DataError("token_stats: manifest has no samples")
    ql = [len(tokenizer(q.instruction)) for q in qa]
    al = [len(tokenizer(q.answer)) for q in qa]
    tasks = Counter(q.task for q in qa)
    return TokenStats(
        ql, al, dict(sorted(Counter(ql).items())), dict(sorted(Counter(al).items())),
        sum(n < 16 for n in ql) / len(ql), sum(n > 7 for n in al) / len(al),
        {t: tasks.get(t, 0) / len(qa) for t in TASKS},
    )


def iter_qa(manifests: Iterable[DatasetManifest]):
    for m in manifests:
        for s in m.samples:
            for q in s.qa:
                yield s, q
