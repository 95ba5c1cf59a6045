"""End-to-end scene QA model: spatial encoder -> compressor -> prefix LM."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .compressor import CompressedQueries, Compressor, CompressorConfig
from .datakit import DatasetManifest, SceneSample
from .encoder import ConfigError, EncoderConfig, SceneGeometry, SpatialEncoder, SpatialFeatures, prepare_geometry
from .lm import LMConfig, PrefixLM, Vocabulary, beam_decode, greedy_decode, pad_batch, sequence_loss
from .nn import Module
from .pointcloud import AxisAlignedBox, normalize, resample
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    compressor: CompressorConfig = field(default_factory=CompressorConfig)
    lm: LMConfig = field(default_factory=LMConfig)

    def __post_init__(self):
        enc, comp, lm = self.encoder, self.compressor, self.lm
        if comp.visual_width != enc.width:
            raise ConfigError(f"compressor.visual_width={comp.visual_width} != encoder.width={enc.width}")
        if comp.lm_width != lm.width:
            raise ConfigError(f"compressor.lm_width={comp.lm_width} != lm.width={lm.width}")
        if comp.vocab_size != lm.vocab_size:
            raise ConfigError(f"compressor.vocab_size={comp.vocab_size} != lm.vocab_size={lm.vocab_size}")
        if lm.n_visual != comp.n_queries:
            raise ConfigError(f"lm.n_visual={lm.n_visual} != compressor.n_queries={comp.n_queries}")
        if comp.max_text_len < lm.max_instruction_len:
            raise ConfigError("compressor.max_text_len must cover lm.max_instruction_len")
        if comp.query_fusion and comp.n_queries > enc.n_3d:
            raise ConfigError(f"query fusion needs n_queries <= n_3d, got {comp.n_queries} > {enc.n_3d}")

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "compressor": self.compressor.to_dict(), "lm": self.lm.to_dict()}

    @classmethod
    def from_dict(cls, raw: dict) -> ModelConfig:
        try:
            return cls(EncoderConfig(**raw.get("encoder", {})), CompressorConfig(**raw.get("compressor", {})),
                       LMConfig(**raw.get("lm", {})))
        except TypeError as exc:
            raise ConfigError(f"model config: {exc}") from exc

    def with_vocab(self, vocab_size: int) -> ModelConfig:
        return replace(self, compressor=replace(self.compressor, vocab_size=vocab_size),
                       lm=replace(self.lm, vocab_size=vocab_size))

    def with_queries(self, n_queries: int) -> ModelConfig:
        return replace(self, compressor=replace(self.compressor, n_queries=n_queries),
                       lm=replace(self.lm, n_visual=n_queries))

    def with_fusion(self, enabled: bool) -> ModelConfig:
        return replace(self, compressor=replace(self.compressor, query_fusion=enabled))


def preset(name: str, vocab_size: int = 64) -> ModelConfig:
    """Named configurations: ``tiny`` (gradient checks), ``small`` (memorisation runs),
    ``desk`` (CPU training) and ``full`` (published sizes)."""
    if name == "small":
        enc = EncoderConfig(n_points=128, n_enc=32, n_3d=8, width=16, enc_layers=1, dec_layers=1, heads=2,
                            radius=0.3, group_size=8)
        comp = CompressorConfig(n_queries=4, n_blocks=1, query_width=16, text_width=16, width=16, lm_width=32,
                                visual_width=16, heads=2, vocab_size=vocab_size, max_text_len=16)
        lm = LMConfig(vocab_size=vocab_size, width=32, layers=2, heads=4, max_response_len=16,
                      max_instruction_len=16, n_visual=4)
    elif name == "tiny":
        enc = EncoderConfig(n_points=32, n_enc=16, n_3d=8, width=8, enc_layers=1, dec_layers=1, heads=2,
                            radius=0.5, group_size=4)
        comp = CompressorConfig(n_queries=4, n_blocks=1, query_width=8, text_width=8, width=8, lm_width=8,
                                visual_width=8, heads=2, vocab_size=vocab_size, max_text_len=16)
        lm = LMConfig(vocab_size=vocab_size, width=8, layers=1, heads=2, max_response_len=16,
                      max_instruction_len=16, n_visual=4)
    elif name == "desk":
        enc = EncoderConfig(n_points=512, n_enc=64, n_3d=16, width=32, enc_layers=1, dec_layers=2, heads=4,
                            radius=0.25, group_size=16)
        comp = CompressorConfig(n_queries=8, n_blocks=2, query_width=32, text_width=32, width=32, lm_width=32,
                                visual_width=32, heads=4, vocab_size=vocab_size, max_text_len=16)
        lm = LMConfig(vocab_size=vocab_size, width=32, layers=2, heads=4, max_response_len=16,
                      max_instruction_len=16, n_visual=8)
    elif name == "full":
        enc = EncoderConfig(n_points=4096, n_enc=1024, n_3d=256, width=64)
        comp = CompressorConfig(n_queries=32, vocab_size=vocab_size)
        lm = LMConfig(vocab_size=vocab_size, n_visual=32)
    else:
        raise ConfigError(f"unknown preset {name!r}; choose tiny, small, desk or full")
    return ModelConfig(enc, comp, lm)


# ---------------------------------------------------------------- examples
@dataclass
class PreparedScene:
    scene_id: str
    geometry: SceneGeometry
    boxes: list[AxisAlignedBox]
    centroid: np.ndarray
    scale: float
    cloud_points: np.ndarray       # normalised, resampled points fed to the encoder


@dataclass
class Example:
    id: str
    scene: PreparedScene
    question: str
    instruction: tuple[int, ...]
    response: tuple[int, ...]      # ends with EOS
    task: str
    references: list[str]


def scene_rng(scene_id: str, seed: int = 0) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(scene_id.encode()), seed])


def prepare_scene(sample: SceneSample, cfg: EncoderConfig, seed: int = 0) -> PreparedScene:
    """Normalise the cloud, resample to ``cfg.n_points`` and map boxes into the same frame."""
    if sample.cloud is None:
        raise ValueError(f"scene {sample.scene_id}: point cloud not loaded")
    cloud = sample.cloud
    if len(cloud) != cfg.n_points:
        cloud = resample(cloud, cfg.n_points, scene_rng(sample.scene_id, seed))
    norm = normalize(cloud)
    geom = prepare_geometry(norm.cloud, cfg)
    boxes = [o.to_box([], []).transformed(norm.centroid, norm.scale) for o in sample.objects]
    return PreparedScene(sample.scene_id, geom, boxes, norm.centroid, norm.scale, norm.cloud.points)


def build_examples(manifest: DatasetManifest, vocab: Vocabulary, cfg: ModelConfig,
                   cache: dict[str, PreparedScene] | None = None, tasks: Sequence[str] | None = None) -> list[Example]:
    cache = {} if cache is None else cache
    out = []
    for s in manifest.samples:
        if s.scene_id not in cache:
            cache[s.scene_id] = prepare_scene(s, cfg.encoder)
        for q in s.qa:
            if tasks is not None and q.task not in tasks:
                continue
            instr = vocab.encode(q.instruction).ids[: cfg.lm.max_instruction_len]
            resp = vocab.encode(q.answer, role="response").ids
            if len(resp) > cfg.lm.max_response_len:
                resp = resp[: cfg.lm.max_response_len - 1] + resp[-1:]
            out.append(Example(q.id, cache[s.scene_id], q.instruction, instr, resp, q.task, q.refs()))
    return out


# -------------------------------------------------------------------- model
class SceneQAModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self.encoder = SpatialEncoder(cfg.encoder, rng)
        self.compressor = Compressor(cfg.compressor, rng)
        self.lm = PrefixLM(cfg.lm, rng)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def spatial(self, geoms: Sequence[SceneGeometry]) -> SpatialFeatures:
        return self.encoder(geoms)

    def condition(self, examples: Sequence[Example]) -> tuple[CompressedQueries, np.ndarray, np.ndarray, SpatialFeatures]:
        spatial = self.spatial([e.scene.geometry for e in examples])
        ids, mask = pad_batch([e.instruction for e in examples])
        comp = self.compressor(ids, spatial, mask)
        return comp, ids, mask, spatial

    def loss(self, examples: Sequence[Example]) -> Tensor:
        comp, ids, mask, _ = self.condition(examples)
        return sequence_loss(self.lm, comp.q_final, ids, mask, [e.response for e in examples])

    def generate_ids(self, examples: Sequence[Example], mode: str = "greedy", beam_width: int = 3,
                     max_len: int | None = None) -> list[list[int]]:
        with T.no_grad():
            comp, ids, mask, _ = self.condition(examples)
            if mode == "greedy":
                return greedy_decode(self.lm, comp.q_final, ids, mask, max_len)
            if mode != "beam":
                raise ValueError(f"decode mode must be greedy or beam, got {mode!r}")
            out = []
            for i in range(len(examples)):
                visual = T.Tensor(comp.q_final.data[i:i + 1])
                out.append(beam_decode(self.lm, visual, ids[i:i + 1], mask[i:i + 1], beam_width, max_len))
            return out

    def generate(self, examples: Sequence[Example], vocab: Vocabulary, mode: str = "greedy",
                 beam_width: int = 3) -> list[str]:
        return [vocab.decode(seq) for seq in self.generate_ids(examples, mode, beam_width)]


def config_record(cfg: ModelConfig) -> dict:
    return asdict(cfg)
