"""Convolutional review classifiers.

``Dg`` separates genuine (class 0) from fraud (class 1) with a single softmax
head P. ``Df`` separates generated fraud (class 0) from human-written fraud
(class 1) and adds a second head Q over the C score categories.

Pipeline: embed tokens -> per window width u, slide a linear kernel plus ReLU
over positions -> max-pool each filter over positions -> concatenate pooled
filters into the text vector -> append the normalised score and any enabled
behavioural features -> heads. Q reads the text vector only, so it cannot
recover the score from the appended score feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamSet, Rng, Tape, Tensor
from .corpus import FEATURE_NAMES, normalized_score

DG, DF = "Dg", "Df"
GENUINE_CLASS, FRAUD_CLASS = 0, 1
BOT_CLASS, HUMAN_CLASS = 0, 1


class ConfigError(ValueError):
    pass


@dataclass
class DiscriminatorConfig:
    kind: str
    T: int
    embed_dim: int
    C: int
    windows: Sequence[int] = (1, 2, 3)
    filters: int | Sequence[int] = 16
    n_labels: int = 2
    score_in_d: bool = True
    features: Sequence[str] = field(default_factory=tuple)
    init_scale: float = 0.1

    def filter_counts(self) -> list[int]:
        if isinstance(self.filters, int):
            return [self.filters] * len(self.windows)
        return list(self.filters)

    def validate(self) -> None:
        if self.kind not in (DG, DF):
            raise ConfigError(f"kind must be {DG!r} or {DF!r}")
        counts = self.filter_counts()
        if not self.windows or len(counts) != len(self.windows):
            raise ConfigError("need one filter count per window width")
        if any(u < 1 or u > self.T for u in self.windows):
            raise ConfigError(f"window widths must lie in [1, T={self.T}]")
        if any(f < 1 for f in counts):
            raise ConfigError("filter counts must be positive")
        unknown = set(self.features) - set(FEATURE_NAMES)
        if unknown:
            raise ConfigError(f"unknown behavioural features {sorted(unknown)}")

    @property
    def text_dim(self) -> int:
        return sum(self.filter_counts())

    @property
    def head_dim(self) -> int:
        return self.text_dim + int(self.score_in_d) + len(self.features)


class DiscOutput(NamedTuple):
    p: np.ndarray
    q: np.ndarray | None


class Batch(NamedTuple):
    """Encoded reviews with score categories and optional scaled behavioural rows."""

    ids: np.ndarray
    cats: np.ndarray
    feats: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "Batch":
        return Batch(self.ids[idx], self.cats[idx], None if self.feats is None else self.feats[idx])

    @staticmethod
    def join(a: "Batch", b: "Batch") -> "Batch":
        feats = None if a.feats is None or b.feats is None else np.concatenate([a.feats, b.feats])
        return Batch(np.concatenate([a.ids, b.ids]), np.concatenate([a.cats, b.cats]), feats)


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, seed: int = 0):
        config.validate()
        self.config = cfg = config
        rng = Rng(seed, f"disc-init-{cfg.kind}")
        arrays = {}
        for u, F in zip(cfg.windows, cfg.filter_counts()):
            arrays[f"conv{u}_w"] = cfg.init_scale * rng.normal((u * cfg.embed_dim, F))
            arrays[f"conv{u}_b"] = np.full(F, 0.01)
        arrays["p_w"] = np.zeros((cfg.head_dim, cfg.n_labels))
        arrays["p_b"] = np.zeros(cfg.n_labels)
        if cfg.kind == DF:
            arrays["q_w"] = np.zeros((cfg.text_dim, cfg.C))
            arrays["q_b"] = np.zeros(cfg.C)
        self.params = ParamSet(arrays)

    @property
    def kind(self) -> str:
        return self.config.kind

    def text_features(self, ids: np.ndarray, embeddings, unfold: bool = False) -> Tensor:
        """Pooled filter activations; ``unfold=True`` uses the explicit window matrix."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        cfg = self.config
        if ids.shape[1] != cfg.T:
            raise ConfigError(f"sequence length {ids.shape[1]} != configured T={cfg.T}")
        emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        if emb.shape[1] != cfg.embed_dim:
            raise ConfigError(f"embedding dim {emb.shape[1]} != configured {cfg.embed_dim}")
        pooled = []
        if unfold:
            x = ad.take_rows(emb, ids)
            for u in cfg.windows:
                h = ad.relu(ad.windows(x, u) @ self.params[f"conv{u}_w"] + self.params[f"conv{u}_b"])
                pooled.append(ad.max_pool(h, axis=1))
            return ad.concat(pooled, axis=1)
        # same convolution, computed as per-token kernel projections gathered by id
        E, T = cfg.embed_dim, cfg.T
        for u in cfg.windows:
            w = self.params[f"conv{u}_w"]
            span = T - u + 1
            acc = self.params[f"conv{u}_b"]
            for j in range(u):
                proj = emb @ w[j * E : (j + 1) * E]
                acc = acc + ad.take_rows(proj, ids[:, j : j + span])
            pooled.append(ad.max_pool(ad.relu(acc), axis=1))
        return ad.concat(pooled, axis=1)

    def forward(self, ids: np.ndarray, embeddings, cats=None, feats=None) -> tuple[Tensor, Tensor | None]:
        """Head logits for a batch: ``(P logits, Q logits or None)``."""
        cfg = self.config
        f_text = self.text_features(ids, embeddings)
        n = f_text.shape[0]
        parts = [f_text]
        if cfg.score_in_d:
            if cats is None:
                raise ConfigError("score required when the score is concatenated")
            parts.append(Tensor(normalized_score(cats, cfg.C).reshape(n, 1)))
        if cfg.features:
            if feats is None or np.shape(feats) != (n, len(cfg.features)):
                raise ConfigError(f"expected behavioural features of shape ({n}, {len(cfg.features)})")
            parts.append(Tensor(feats))
        f = ad.concat(parts, axis=1) if len(parts) > 1 else f_text
        p_logits = f @ self.params["p_w"] + self.params["p_b"]
        q_logits = None
        if cfg.kind == DF:
            q_logits = f_text @ self.params["q_w"] + self.params["q_b"]
        return p_logits, q_logits

    def predict(self, ids: np.ndarray, embeddings, cats=None, feats=None) -> DiscOutput:
        p_logits, q_logits = self.forward(ids, embeddings, cats, feats)
        return DiscOutput(ad.softmax(p_logits.data), None if q_logits is None else ad.softmax(q_logits.data))

    def predict_batch(self, batch: Batch, embeddings, chunk: int = 2048) -> DiscOutput:
        outs = [self.predict(batch.ids[i : i + chunk], embeddings, batch.cats[i : i + chunk],
                             None if batch.feats is None else batch.feats[i : i + chunk])
                for i in range(0, len(batch), chunk)]
        p = np.concatenate([o.p for o in outs])
        q = None if outs[0].q is None else np.concatenate([o.q for o in outs])
        return DiscOutput(p, q)


def d_forward(disc: Discriminator, seq, embeddings, score: int | None = None, features=None) -> DiscOutput:
    """Single-review convenience wrapper around :meth:`Discriminator.predict`."""
    ids = getattr(seq, "ids", seq)
    cats = None if score is None else np.array([score])
    feats = None
    if features is not None:
        feats = np.asarray(features, dtype=np.float64).reshape(1, -1)
    out = disc.predict(np.asarray(ids)[None, :], embeddings, cats, feats)
    return DiscOutput(out.p[0], None if out.q is None else out.q[0])


class StepResult(NamedTuple):
    loss: float
    p_loss: float
    q_loss: float = 0.0
    igm: float = 0.0


def _two_sided_ce(disc: Discriminator, pos: Batch, neg: Batch, pos_class: int, neg_class: int,
                  embeddings) -> tuple[Tensor, Tensor | None]:
    both = Batch.join(pos, neg)
    p_logits, q_logits = disc.forward(both.ids, embeddings, both.cats, both.feats)
    logp = ad.log_softmax(p_logits)
    n = len(pos)
    targets = np.r_[np.full(n, pos_class), np.full(len(neg), neg_class)]
    per_item = ad.pick(logp, targets)
    loss = -(ad.mean(per_item[:n]) + ad.mean(per_item[n:])) * 0.5
    return loss, q_logits


def dg_loss(dg: Discriminator, pos: Batch, neg: Batch, embeddings) -> Tensor:
    """Balanced cross-entropy: genuine ``pos`` as class 0, fraud ``neg`` as class 1."""
    loss, _ = _two_sided_ce(dg, pos, neg, GENUINE_CLASS, FRAUD_CLASS, embeddings)
    return loss


def df_losses(df: Discriminator, pos: Batch, neg: Batch, embeddings) -> tuple[Tensor, Tensor]:
    """P cross-entropy (human ``pos`` vs generated ``neg``) and Q cross-entropy on scores."""
    p_loss, q_logits = _two_sided_ce(df, pos, neg, HUMAN_CLASS, BOT_CLASS, embeddings)
    q_loss = ad.cross_entropy(q_logits, np.concatenate([pos.cats, neg.cats]))
    return p_loss, q_loss


def train_dg_step(dg: Discriminator, pos: Batch, neg: Batch, embeddings, optimizer: Adam,
                  igm_fn=None, lam: float = 0.0, coupled: Sequence = ()) -> StepResult:
    """One update of D_g on ``-(log-likelihood + lam * igm)``.

    ``igm_fn`` builds the regulariser on the same tape; ``coupled`` optimizers
    (for the Q head and the generator) receive its gradient in the same step.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if not len(pos) or not len(neg):
        raise ad.UsageError("train_dg_step needs non-empty batches")
    with Tape() as tape:
        ce = dg_loss(dg, pos, neg, embeddings)
        total = ce
        igm_value = 0.0
        if igm_fn is not None and lam > 0:
            igm = igm_fn()
            igm_value = igm.item()
            total = ce - lam * igm
    ad.backward(tape, total)
    optimizer.step("descend")
    for opt in coupled:
        if any(p.grad is not None for p in opt.params.values()):
            opt.step("descend")
    return StepResult(total.item(), ce.item(), 0.0, igm_value)


def train_df_step(df: Discriminator, pos: Batch, neg: Batch, embeddings, optimizer: Adam,
                  use_q: bool = True) -> StepResult:
    """One descent step on P cross-entropy plus (optionally) Q cross-entropy."""
    if df.kind != DF:
        raise ConfigError("train_df_step needs a Df model")
    if not len(pos) or not len(neg):
        raise ad.UsageError("train_df_step needs non-empty batches")
    with Tape() as tape:
        p_loss, q_loss = df_losses(df, pos, neg, embeddings)
        total = p_loss + q_loss if use_q else p_loss
    ad.backward(tape, total)
    optimizer.step("descend")
    return StepResult(total.item(), p_loss.item(), q_loss.item())
