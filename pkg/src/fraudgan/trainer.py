"""Adversarial training loop with Monte-Carlo rollout rewards.

Every outer iteration draws from its own named random stream and ends by
rounding all parameters and optimizer moments to float32, the precision
stored in checkpoints. A run resumed from the checkpoint of iteration k
therefore continues exactly like the uninterrupted run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import corpus as cp
from .autodiff import SGD, Adam, ParamSet, Rng, UsageError
from .config import TrainConfig
from .corpus import END_ID, Review
from .discriminator import (
    DF, DG, FRAUD_CLASS, HUMAN_CLASS, Batch, Discriminator, DiscriminatorConfig,
    train_df_step, train_dg_step,
)
from .generator import Generator, GeneratorConfig, SampledSequence, mle_pretrain, n_steps, policy_update, rollout_complete
from .igm import igm_regularizer_estimate
from .metrics import MetricsReport, evaluate

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rewards


class Rewarder:
    """D_f's human-written probability plus D_g's fraud probability."""

    def __init__(self, df: Discriminator, dg: Discriminator, embeddings: np.ndarray,
                 scaler: cp.FeatureScaler | None = None):
        self.df, self.dg, self.embeddings = df, dg, embeddings
        self.scaler = scaler or cp.FeatureScaler()
        self.C = dg.config.C

    def dg_features(self, ids: np.ndarray, cats: np.ndarray) -> np.ndarray | None:
        names = self.dg.config.features
        if not names:
            return None
        return generated_features(ids, cats, self.C, self.scaler, names)

    def __call__(self, ids: np.ndarray, cats: np.ndarray) -> np.ndarray:
        ids = np.atleast_2d(ids)
        cats = np.asarray(cats)
        pf = self.df.predict(ids, self.embeddings, cats).p[:, HUMAN_CLASS]
        pg = self.dg.predict(ids, self.embeddings, cats, self.dg_features(ids, cats)).p[:, FRAUD_CLASS]
        return pf + pg


def generated_features(ids, cats, C, scaler, names) -> np.ndarray:
    lengths = cp.true_lengths(ids)
    rows = np.stack([
        cp.bot_behavior(int(n), cp.category_to_score(int(c), C), C).as_array()
        for n, c in zip(lengths, cats)
    ])
    return _select(scaler.transform(rows), names)


def _select(scaled: np.ndarray, names: Sequence[str]) -> np.ndarray:
    cols = [cp.FEATURE_NAMES.index(n) for n in names]
    return scaled[:, cols]


def _mean(values: np.ndarray) -> float:
    return math.fsum(values) / len(values)


def mc_reward(gen: Generator, df: Discriminator, dg: Discriminator, prefix: Sequence[int], score: int,
              N: int, rng: Rng, *, embeddings: np.ndarray, noise: np.ndarray | None = None,
              scaler: cp.FeatureScaler | None = None) -> float:
    """Reward of the action that produced the last token of ``prefix``.

    A complete prefix (length T, or ending in END) is scored directly;
    otherwise the score is averaged over ``N`` rollout completions.
    """
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    t, T = len(prefix), gen.config.T
    if N < 1:
        raise ValueError("N must be >= 1")
    if t == 0:
        raise UsageError("reward needs at least one generated token")
    if t > T:
        raise UsageError(f"prefix length {t} exceeds T={T}")
    reward = Rewarder(df, dg, embeddings, scaler)
    if t == T or prefix[-1] == END_ID:
        full = np.full(T, END_ID, dtype=np.int64)
        full[:t] = prefix
        return float(reward(full[None, :], np.array([score]))[0])
    ids = rollout_complete(gen, prefix, score, N, rng, noise=noise)
    return _mean(reward(ids, np.full(N, score)))


def word_rewards(gen: Generator, reward: Callable, ids: np.ndarray, cats: np.ndarray, z: np.ndarray,
                 N: int, rng: Rng) -> np.ndarray:
    """Per-step rewards ``(n, T)`` for sampled sequences; zero past each sequence's last step."""
    n, T = ids.shape
    steps = n_steps(ids)
    out = np.zeros((n, T))
    full = reward(ids, cats)
    out[np.arange(n), steps - 1] = full
    h, c = gen.initial_state(z, cats)
    prev = None
    for t in range(1, int(steps.max())):
        # state after reading the first t tokens
        _, h, c = gen._step(gen._input(prev, n), h, c)
        prev = ids[:, t - 1]
        rows = np.flatnonzero(steps > t)
        if not len(rows):
            break
        rep = np.repeat(rows, N)
        comp, _ = gen.continue_from(ids[rep, :t], h[rep], c[rep], rng)
        vals = reward(comp, cats[rep]).reshape(len(rows), N)
        out[rows, t - 1] = vals.mean(axis=1)
    return out


# ---------------------------------------------------------------------------
# data


@dataclass
class Data:
    vocab: cp.Vocab
    embeddings: np.ndarray
    C: int
    genuine: Batch
    fraud_human: Batch
    test: Batch
    test_labels: np.ndarray
    scaler: cp.FeatureScaler
    n_train: int = 0


def _batch(reviews: Sequence[Review], vocab, T, C, behavior, scaler, names) -> Batch:
    ids = cp.encode_batch(reviews, vocab, T)
    cats = np.array([cp.score_to_category(r.score, C) for r in reviews], dtype=np.int64)
    feats = None
    if names:
        rows = np.stack([behavior[r.review_id].as_array() for r in reviews]) if reviews else np.zeros((0, 4))
        feats = _select(scaler.transform(rows), names) if len(rows) else np.zeros((0, len(names)))
    return Batch(ids, cats, feats)


def synth_from_config(cfg: TrainConfig) -> list[Review]:
    spec = cp.SynthSpec(
        vocab_size=cfg.synth_vocab, size=cfg.synth_size, fraud_fraction=cfg.synth_fraud, rho=cfg.synth_rho,
        C=cfg.C, bot_fraction=cfg.synth_bot, min_len=cfg.synth_min_len, max_len=cfg.synth_max_len,
    )
    return cp.synth_corpus(spec, cfg.seed)


def prepare_data(cfg: TrainConfig, corpus: Sequence[Review] | None = None) -> Data:
    if corpus is None:
        corpus = cp.load_corpus(cfg.data, cfg.T) if cfg.data else synth_from_config(cfg)
    kept = [r for r in corpus if len(r.text) < cfg.T]
    if len(kept) < len(corpus):
        log.warning("dropped %d reviews with >= T=%d tokens", len(corpus) - len(kept), cfg.T)
    if not any(r.label == cp.FRAUD_HUMAN for r in kept):
        raise DatasetError("corpus has no human-written fraud reviews")
    if not any(r.label == cp.GENUINE for r in kept):
        raise DatasetError("corpus has no genuine reviews")
    train, test = cp.split(kept, cfg.supervision, cfg.seed)
    vocab = cp.build_vocab(train, cfg.min_freq)
    # rounded to the checkpoint precision so a reloaded model sees the same vectors
    emb = ckpt.to_f32(cp.load_embeddings(cfg.embeddings or None, vocab, cfg.embed_dim, cfg.seed))
    names = cfg.feature_list()
    behavior = cp.extract_behavioral(kept, cfg.C)
    scaler = cp.FeatureScaler.fit(np.stack([behavior[r.review_id].as_array() for r in train]))
    genuine = [r for r in train if r.label == cp.GENUINE]
    # bot-written training rows are unlabeled in practice, so only human fraud trains the models
    fraud = [r for r in train if r.label == cp.FRAUD_HUMAN]
    if not fraud or not genuine:
        raise DatasetError("training split lacks genuine or human-fraud reviews")
    make = lambda rs: _batch(rs, vocab, cfg.T, cfg.C, behavior, scaler, names)
    return Data(
        vocab=vocab, embeddings=emb, C=cfg.C, genuine=make(genuine), fraud_human=make(fraud),
        test=make(test), test_labels=np.array([r.is_fraud for r in test]), scaler=scaler,
        n_train=len(train),
    )


# ---------------------------------------------------------------------------
# models


@dataclass
class Models:
    gen: Generator
    df: Discriminator
    dg: Discriminator
    gen_mle: Adam
    gen_pg: SGD
    df_opt: Adam | SGD
    dg_opt: Adam | SGD

    def param_sets(self) -> dict[str, ParamSet]:
        return {"gen": self.gen.params, "df": self.df.params, "dg": self.dg.params}

    def adams(self) -> dict[str, Adam]:
        return {k: o for k, o in (("gen_mle", self.gen_mle), ("df", self.df_opt), ("dg", self.dg_opt))
                if isinstance(o, Adam)}


def build_models(cfg: TrainConfig, data: "Data | Inference") -> Models:
    gen = Generator(GeneratorConfig(
        vocab_size=len(data.vocab), T=cfg.T, C=cfg.C, embed_dim=cfg.gen_embed_dim,
        hidden_dim=cfg.gen_hidden_dim, noise_dim=cfg.noise_dim, score_dim=cfg.score_dim,
        score_in_g=cfg.score_in_g,
    ), seed=cfg.seed)
    common = dict(T=cfg.T, embed_dim=cfg.embed_dim, C=cfg.C, windows=cfg.window_sizes(),
                  filters=cfg.filters, score_in_d=cfg.score_in_d)
    df = Discriminator(DiscriminatorConfig(kind=DF, **common), seed=cfg.seed)
    dg = Discriminator(DiscriminatorConfig(kind=DG, features=cfg.feature_list(), **common), seed=cfg.seed)
    opt = (lambda p: Adam(p, cfg.disc_rate)) if cfg.disc_optimizer == "adam" else (lambda p: SGD(p, cfg.disc_rate))
    return Models(gen, df, dg, Adam(gen.params, cfg.mle_rate), SGD(gen.params, cfg.gamma), opt(df.params), opt(dg.params))


def quantize(models: Models) -> None:
    for ps in models.param_sets().values():
        for t in ps.values():
            t.data = ckpt.to_f32(t.data)
    for opt in models.adams().values():
        for k in opt.m:
            opt.m[k] = ckpt.to_f32(opt.m[k])
            opt.v[k] = ckpt.to_f32(opt.v[k])


# ---------------------------------------------------------------------------
# training phases


def generate_batch(gen: Generator, n: int, cfg: TrainConfig, data: Data, rng: Rng) -> Batch:
    cats = rng.integers(0, cfg.C, n)
    ids, _, _ = gen.sample_ids(cats, rng)
    feats = generated_features(ids, cats, cfg.C, data.scaler, cfg.feature_list()) if cfg.feature_list() else None
    return Batch(ids, cats, feats)


def _epoch_steps(n_pos: int, n_neg: int, half: int, cfg: TrainConfig) -> int:
    if cfg.disc_steps_per_epoch:
        return cfg.disc_steps_per_epoch
    return math.ceil(max(n_pos, n_neg) / half)


def _minibatches(pos: Batch, neg: Batch, half: int, steps: int, rng: Rng):
    pos_order = np.concatenate([rng.permutation(len(pos)) for _ in range(math.ceil(steps * half / len(pos)) + 1)])
    neg_order = np.concatenate([rng.permutation(len(neg)) for _ in range(math.ceil(steps * half / len(neg)) + 1)])
    for k in range(steps):
        yield pos.take(pos_order[k * half : (k + 1) * half]), neg.take(neg_order[k * half : (k + 1) * half])


def train_df_epoch(m: Models, data: Data, x_fb: Batch, cfg: TrainConfig, rng: Rng) -> float:
    pos = Batch(data.fraud_human.ids, data.fraud_human.cats)
    neg = Batch(x_fb.ids, x_fb.cats)
    half = max(1, cfg.disc_batch // 2)
    steps = _epoch_steps(len(pos), len(neg), half, cfg)
    losses = [train_df_step(m.df, p, n, data.embeddings, m.df_opt).loss
              for p, n in _minibatches(pos, neg, half, steps, rng)]
    return float(np.mean(losses))


def train_dg_epoch(m: Models, data: Data, x_fb: Batch | None, cfg: TrainConfig, rng: Rng,
                   regularize: bool) -> float:
    neg = data.fraud_human if x_fb is None else Batch.join(data.fraud_human, x_fb)
    half = max(1, cfg.disc_batch // 2)
    steps = _epoch_steps(len(data.genuine), len(neg), half, cfg)
    igm_fn = None
    coupled: tuple = ()
    if regularize and cfg.lam > 0:
        igm_fn = lambda: igm_regularizer_estimate(m.gen, m.df, cfg.igm_batch, rng, data.embeddings,
                                                  baseline=cfg.baseline)
        coupled = (m.df_opt, m.gen_pg)
    losses = [train_dg_step(m.dg, p, n, data.embeddings, m.dg_opt, igm_fn, cfg.lam, coupled).loss
              for p, n in _minibatches(data.genuine, neg, half, steps, rng)]
    return float(np.mean(losses))


def generator_step(m: Models, data: Data, cfg: TrainConfig, rng: Rng) -> float:
    cats = rng.integers(0, cfg.C, cfg.gen_batch)
    ids, logp, z = m.gen.sample_ids(cats, rng)
    reward = Rewarder(m.df, m.dg, data.embeddings, data.scaler)
    R = word_rewards(m.gen, reward, ids, cats, z, cfg.rollouts, rng)
    steps = n_steps(ids)
    lengths = cp.true_lengths(ids)
    batch = [
        (SampledSequence(cp.TokenSeq(ids[i], int(lengths[i])), int(cats[i]), logp[i, : steps[i]], z[i]),
         R[i, : steps[i]])
        for i in range(len(ids))
    ]
    policy_update(m.gen, batch, cfg.gamma, cfg.baseline)
    return float(np.mean([r[-1] for _, r in batch]))


def dg_fraud_scores(m: Models, data: Data) -> np.ndarray:
    return m.dg.predict_batch(data.test, data.embeddings).p[:, FRAUD_CLASS]


def run_metadata(cfg: TrainConfig) -> dict:
    return {
        "seed": cfg.seed, "supervision": cfg.supervision, "score_in_g": cfg.score_in_g,
        "score_in_d": cfg.score_in_d, "regularizer_on": cfg.regularizer_on, "augment": cfg.augment,
        "features": cfg.features, "lam": cfg.lam, "gamma": cfg.gamma, "rollouts": cfg.rollouts,
        "disc_optimizer": cfg.disc_optimizer, "disc_rate": cfg.disc_rate, "baseline": cfg.baseline,
    }


@dataclass
class TrainResult:
    models: Models
    data: Data
    reports: list[MetricsReport] = field(default_factory=list)
    config: TrainConfig | None = None

    @property
    def final(self) -> MetricsReport:
        return self.reports[-1]


def pretrain(m: Models, data: Data, cfg: TrainConfig) -> None:
    rng = Rng(cfg.seed, "pretrain")
    seqs = list(zip(data.fraud_human.ids, data.fraud_human.cats))
    if cfg.g_pretrain_epochs:
        mle_pretrain(m.gen, seqs, cfg.g_pretrain_epochs, rng.child("mle"), cfg.gen_batch, cfg.mle_rate, m.gen_mle)
    x_fb = generate_batch(m.gen, len(data.fraud_human), cfg, data, rng.child("fb"))
    drng = rng.child("disc")
    for _ in range(cfg.d_pretrain_epochs):
        train_df_epoch(m, data, x_fb, cfg, drng)
        train_dg_epoch(m, data, x_fb if cfg.augment else None, cfg, drng, regularize=False)


def _report(m: Models, data: Data, cfg: TrainConfig, iteration: int, extra: dict | None = None) -> MetricsReport:
    meta = run_metadata(cfg)
    meta.update(extra or {})
    return evaluate(dg_fraud_scores(m, data), data.test_labels, iteration, **meta)


def adversarial_train(cfg: TrainConfig, corpus: Sequence[Review] | None = None, *,
                      checkpoint_path: str | Path | None = None, resume: str | Path | None = None,
                      on_report: Callable[[MetricsReport], None] | None = None,
                      stop_after: int | None = None) -> TrainResult:
    """Pretrain, then run the adversarial loop for ``cfg.adv_iterations`` outer iterations.

    One :class:`MetricsReport` is emitted after pretraining (iteration 0) and
    one after every outer iteration. ``checkpoint_path`` is rewritten after each
    of them; ``resume`` continues from such a file. ``stop_after`` ends the
    loop early at that iteration (used to test resumption).
    """
    cfg.validate()
    data = prepare_data(cfg, corpus)
    m = build_models(cfg, data)
    reports: list[MetricsReport] = []

    def emit(rep: MetricsReport) -> None:
        reports.append(rep)
        if on_report:
            on_report(rep)

    if resume is not None:
        start = load_state(resume, m, cfg)
        for rep in _reports_from_meta(resume):
            emit(rep)
    else:
        pretrain(m, data, cfg)
        quantize(m)
        emit(_report(m, data, cfg, 0))
        if checkpoint_path:
            save_state(checkpoint_path, m, cfg, 0, reports, data)
        start = 0

    best, stale = max((r.auc for r in reports), default=0.0), 0
    for k in range(start + 1, cfg.adv_iterations + 1):
        if stop_after is not None and k > stop_after:
            break
        rng = Rng(cfg.seed, f"adv/{k}")
        rewards = [generator_step(m, data, cfg, rng.child(f"g{i}")) for i in range(cfg.gen_steps)]
        for j in range(cfg.disc_epochs):
            drng = rng.child(f"d{j}")
            x_fb = generate_batch(m.gen, len(data.fraud_human), cfg, data, drng)
            train_df_epoch(m, data, x_fb, cfg, drng)
            train_dg_epoch(m, data, x_fb if cfg.augment else None, cfg, drng, cfg.regularizer_on)
        quantize(m)
        emit(_report(m, data, cfg, k, {"mean_reward": float(np.mean(rewards))}))
        if checkpoint_path:
            save_state(checkpoint_path, m, cfg, k, reports, data)
        if cfg.early_stop_patience:
            if reports[-1].auc > best:
                best, stale = reports[-1].auc, 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return TrainResult(m, data, reports, cfg)


# ---------------------------------------------------------------------------
# checkpoints


def _report_to_json(r: MetricsReport) -> dict:
    return r.as_dict()


def save_state(path: str | Path, m: Models, cfg: TrainConfig, iteration: int,
               reports: Sequence[MetricsReport] = (), data: Data | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, ps in m.param_sets().items():
        for name, t in ps.items():
            tensors[f"{prefix}/{name}"] = t.data
    for prefix, opt in m.adams().items():
        for name, arr in opt.state().items():
            tensors[f"opt/{prefix}/{name}"] = arr
    if data is not None:
        tensors["data/embeddings"] = data.embeddings
    meta = {
        "config": cfg.as_dict(),
        "iteration": iteration,
        "optimizer_steps": {k: o.t for k, o in m.adams().items()},
        # each outer iteration k reseeds from (seed, "adv/k"), so this is the full RNG state
        "rng": {"seed": cfg.seed, "next_stream": f"adv/{iteration + 1}"},
        "reports": [_report_to_json(r) for r in reports],
    }
    if data is not None:
        meta["vocab"] = list(data.vocab.itos)
        meta["scaler"] = {"low": data.scaler.low.tolist(), "high": data.scaler.high.tolist()}
    ckpt.save(path, tensors, meta)


def save_checkpoint(models: Models, cfg: TrainConfig, iteration: int, path: str | Path,
                    data: Data | None = None) -> None:
    save_state(path, models, cfg, iteration, data=data)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: TrainConfig
    iteration: int
    meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, meta = ckpt.load(path)
    try:
        cfg = TrainConfig(**meta["config"])
    except TypeError as exc:
        raise ckpt.CheckpointError(f"{path}: config snapshot does not match this build ({exc})") from None
    return Checkpoint(tensors, cfg, int(meta["iteration"]), meta)


def load_state(path: str | Path, m: Models, cfg: TrainConfig) -> int:
    cp_ = load_checkpoint(path)
    if cp_.config.as_dict() != cfg.as_dict():
        diff = sorted(k for k, v in cfg.as_dict().items() if cp_.config.as_dict().get(k) != v)
        log.warning("resuming with config changes in %s", diff)
    states: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in cp_.tensors.items():
        head, rest = name.split("/", 1)
        if head == "data":
            continue
        states.setdefault(head, {})[rest] = arr
    for prefix, ps in m.param_sets().items():
        ps.load(states[prefix])
    opt_state: dict[str, dict[str, np.ndarray]] = {}
    for rest, arr in states.get("opt", {}).items():
        key, sub = rest.split("/", 1)
        opt_state.setdefault(key, {})[sub] = arr
    for key, opt in m.adams().items():
        opt.load(opt_state[key], cp_.meta["optimizer_steps"][key])
    return cp_.iteration


def _reports_from_meta(path) -> list[MetricsReport]:
    _, meta = ckpt.load(path)
    return [MetricsReport(**r) for r in meta.get("reports", [])]


@dataclass
class Inference:
    """What a saved run needs besides its weights to score or generate text."""

    vocab: cp.Vocab
    embeddings: np.ndarray
    scaler: cp.FeatureScaler


def load_models(path: str | Path) -> tuple[Models, Inference, TrainConfig]:
    """Rebuild the models of a saved run without access to its corpus."""
    cp_ = load_checkpoint(path)
    if "vocab" not in cp_.meta or "data/embeddings" not in cp_.tensors:
        raise ckpt.CheckpointError(f"{path}: checkpoint lacks the vocabulary or embeddings")
    sc = cp_.meta["scaler"]
    info = Inference(cp.Vocab(cp_.meta["vocab"][2:]), cp_.tensors["data/embeddings"],
                     cp.FeatureScaler(np.array(sc["low"]), np.array(sc["high"])))
    m = build_models(cp_.config, info)
    load_state(path, m, cp_.config)
    return m, info, cp_.config
