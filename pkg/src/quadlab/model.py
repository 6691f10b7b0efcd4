"""Toy encoder transformer over [answer-query | visual regions | question]."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# reference scale of the original backbone, kept for documentation/tests
PAPER_N_LAYERS = 12
PAPER_N_HEADS = 12
PAPER_N_REGIONS = 36


@dataclass
class ModelConfig:
    question_vocab_size: int
    answer_vocab_size: int
    max_question_len: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    n_regions: int = 9
    d_visual: int = 32
    visual_positions: bool = True

    def __post_init__(self):
        dims = (self.question_vocab_size, self.answer_vocab_size, self.max_question_len,
                self.d_model, self.n_layers, self.n_heads, self.d_ff, self.n_regions, self.d_visual)
        if min(dims) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def seq_len(self) -> int:
        return 1 + self.n_regions + self.max_question_len

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def init_params(config: ModelConfig, seed: int, std: float = 0.02) -> dict[str, Tensor]:
    """normal(0, std) weights and embeddings, zero biases, unit LN gains.

    The trainer overrides the small default with TrainConfig.init_std.
    """
    rng = np.random.default_rng(seed)
    d, ff = config.d_model, config.d_ff

    def w(*shape):
        return rng.normal(0.0, std, size=shape)

    raw: dict[str, np.ndarray] = {
        "vis.w1": w(config.d_visual, d),
        "vis.b1": np.zeros(d),
        "vis.w2": w(d, d),
        "vis.b2": np.zeros(d),
        "vis.pos": w(config.n_regions, d),
        "q.embed": w(config.question_vocab_size, d),
        "q.pos": w(config.max_question_len, d),
        "answer_query": w(1, d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        raw.update({
            p + "ln1.g": np.ones(d), p + "ln1.b": np.zeros(d),
            p + "wq": w(d, d), p + "bq": np.zeros(d),
            p + "wk": w(d, d), p + "bk": np.zeros(d),
            p + "wv": w(d, d), p + "bv": np.zeros(d),
            p + "wo": w(d, d), p + "bo": np.zeros(d),
            p + "ln2.g": np.ones(d), p + "ln2.b": np.zeros(d),
            p + "ff1": w(d, ff), p + "bf1": np.zeros(ff),
            p + "ff2": w(ff, d), p + "bf2": np.zeros(d),
        })
    raw.update({
        "ln_f.g": np.ones(d), "ln_f.b": np.zeros(d),
        "head.w": w(d, config.answer_vocab_size), "head.b": np.zeros(config.answer_vocab_size),
    })
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


@dataclass
class AttentionCapture:
    """Per-layer attention, each (batch, heads, S, S).

    ``probs`` are the post-softmax maps, ``scores`` the scaled pre-softmax
    query-key products.
    """
    probs: list[Tensor] = field(default_factory=list)
    scores: list[Tensor] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.probs)

    @property
    def geometry(self) -> tuple:
        return tuple(p.shape for p in self.probs)

    def map(self, layer: int, head: int, item: int = 0) -> np.ndarray:
        return self.probs[layer].data[item, head]

    def maps(self, item: int = 0) -> list[list[np.ndarray]]:
        return [[p.data[item, h] for h in range(p.shape[1])] for p in self.probs]


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def project_visual(features, params: dict[str, Tensor]) -> Tensor:
    """dense -> GELU -> dense, rowwise. Works on (R, dv) or (B, R, dv)."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.shape[-1] != params["vis.w1"].shape[0]:
        raise ad.DimensionError(
            f"visual feature width {x.shape[-1]} != {params['vis.w1'].shape[0]}")
    h = ad.gelu(dense(x, params["vis.w1"], params["vis.b1"]))
    return dense(h, params["vis.w2"], params["vis.b2"])


def _attention(h: Tensor, params, prefix: str, n_heads: int):
    b, s, d = h.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, s, n_heads, dh)), (0, 2, 1, 3))

    q = heads(dense(h, params[prefix + "wq"], params[prefix + "bq"]))
    k = heads(dense(h, params[prefix + "wk"], params[prefix + "bk"]))
    v = heads(dense(h, params[prefix + "wv"], params[prefix + "bv"]))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), Tensor(1.0 / math.sqrt(dh)))
    probs = ad.softmax_rows(scores)
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
    return dense(ctx, params[prefix + "wo"], params[prefix + "bo"]), scores, probs


def forward(config: ModelConfig, params: dict[str, Tensor], visual, questions):
    """Batched forward.

    visual: (B, n_regions, d_visual) or a single (n_regions, d_visual) scene.
    questions: (B, Lq) or (Lq,) int token ids, Lq <= max_question_len.
    Returns (logits (B, V), AttentionCapture); a single input gives logits (V,).
    """
    x = np.asarray(visual.data if isinstance(visual, Tensor) else visual, dtype=np.float64)
    q = np.asarray(questions, dtype=np.int64)
    single = x.ndim == 2
    if single:
        x, q = x[None], q[None]
    if q.ndim != 2 or q.shape[0] != x.shape[0]:
        raise ad.DimensionError(f"question batch {q.shape} vs visual batch {x.shape}")
    if x.shape[1] != config.n_regions:
        raise ad.DimensionError(f"expected {config.n_regions} regions, got {x.shape[1]}")
    lq = q.shape[1]
    if lq > config.max_question_len:
        raise ValueError(f"question length {lq} exceeds max_question_len {config.max_question_len}")
    if q.size and (q.min() < 0 or q.max() >= config.question_vocab_size):
        raise IndexError("unknown question token id")
    b = x.shape[0]

    vis = project_visual(x, params)
    if config.visual_positions:
        vis = ad.add(vis, params["vis.pos"])
    qe = ad.add(ad.embedding(params["q.embed"], q), params["q.pos"][:lq])
    aq = ad.add(Tensor(np.zeros((b, 1, config.d_model))), params["answer_query"])
    h = ad.concat([aq, vis, qe], axis=1)

    cap = AttentionCapture()
    for i in range(config.n_layers):
        p = f"layer{i}."
        a, scores, probs = _attention(ad.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"]),
                                      params, p, config.n_heads)
        cap.scores.append(scores)
        cap.probs.append(probs)
        h = ad.add(h, a)
        f = ad.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        f = dense(ad.gelu(dense(f, params[p + "ff1"], params[p + "bf1"])), params[p + "ff2"], params[p + "bf2"])
        h = ad.add(h, f)

    cls = ad.layer_norm(h[:, 0, :], params["ln_f.g"], params["ln_f.b"])
    logits = dense(cls, params["head.w"], params["head.b"])
    if single:
        logits = logits[0]
    return logits, cap


class Model:
    """Config + named parameters; ``frozen`` models never record gradients."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], frozen: bool = False):
        self.config = config
        self.params = params
        self.frozen = frozen

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_params(config, seed))

    def __call__(self, visual, questions):
        if self.frozen:
            with ad.no_grad():
                return forward(self.config, self.params, visual, questions)
        return forward(self.config, self.params, visual, questions)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ad.DimensionError(f"{k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path) -> None:
        ad.save_tensors(path, self.params)
        with open(str(path) + ".json", "w") as f:
            f.write(self.config.to_json())

    @classmethod
    def load(cls, path) -> "Model":
        with open(str(path) + ".json") as f:
            config = ModelConfig.from_json(f.read())
        model = cls.init(config, 0)
        model.load_state_dict(ad.load_tensors(path))
        return model


def clone_frozen(model: Model) -> Model:
    """Deep copy flagged non-trainable."""
    params = {k: Tensor(v.data.copy(), requires_grad=False, name=k) for k, v in model.params.items()}
    return Model(model.config, params, frozen=True)


def clone(model: Model) -> Model:
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in model.params.items()}
    return Model(model.config, params)
