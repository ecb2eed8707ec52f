"""Review ingestion, vocabulary, fixed-length encoding and synthetic corpora."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date as Date
from datetime import timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Rng

log = logging.getLogger(__name__)

END = "END"
UNK = "UNK"
END_ID = 0
UNK_ID = 1

GENUINE = "genuine"
FRAUD_HUMAN = "fraud-human"
FRAUD_BOT = "fraud-bot"
LABELS = (GENUINE, FRAUD_HUMAN, FRAUD_BOT)

_FILE_LABELS = {"genuine": GENUINE, "fraud": FRAUD_HUMAN, FRAUD_HUMAN: FRAUD_HUMAN, FRAUD_BOT: FRAUD_BOT}


class CorpusError(ValueError):
    pass


class LengthError(CorpusError):
    pass


class EmbeddingFormatError(CorpusError):
    pass


class StratificationError(CorpusError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Review:
    review_id: str
    text: list[str]
    score: int
    label: str
    user_id: str | None = None
    item_id: str | None = None
    date: Date | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise CorpusError(f"unknown label {self.label!r}")
        if self.score not in (-1, 1, 2, 3, 4, 5):
            raise CorpusError(f"score {self.score} outside 1..5 and {{-1, 1}}")
        if not self.text:
            raise CorpusError(f"review {self.review_id} has no tokens")

    @property
    def is_fraud(self) -> bool:
        return self.label != GENUINE

    def to_record(self) -> dict:
        rec = {
            "review_id": self.review_id,
            "text": " ".join(self.text),
            "score": self.score,
            "label": GENUINE if self.label == GENUINE else "fraud",
        }
        if self.label == FRAUD_BOT:
            rec["origin"] = "bot"
        for key in ("user_id", "item_id"):
            if getattr(self, key) is not None:
                rec[key] = getattr(self, key)
        if self.date is not None:
            rec["date"] = self.date.isoformat()
        return rec


class Corpus(list):
    """A list of reviews that remembers how many input lines were rejected."""

    rejected: int = 0


def review_from_record(rec: dict, where: str = "record") -> Review:
    try:
        text = rec["text"]
        score = rec["score"]
        raw_label = rec["label"]
    except KeyError as exc:
        raise CorpusError(f"{where}: missing field {exc.args[0]!r}") from None
    label = _FILE_LABELS.get(str(raw_label))
    if label is None:
        raise CorpusError(f"{where}: unknown label {raw_label!r}")
    if label == FRAUD_HUMAN and rec.get("origin") == "bot":
        label = FRAUD_BOT
    if isinstance(score, bool) or not isinstance(score, int):
        raise CorpusError(f"{where}: score must be an integer, got {score!r}")
    raw_date = rec.get("date")
    try:
        day = Date.fromisoformat(raw_date) if raw_date else None
    except ValueError:
        raise CorpusError(f"{where}: bad date {raw_date!r}") from None
    tokens = tokenize(text) if isinstance(text, str) else [str(t) for t in text]
    try:
        return Review(
            review_id=str(rec.get("review_id", where)),
            text=tokens,
            score=score,
            label=label,
            user_id=rec.get("user_id"),
            item_id=rec.get("item_id"),
            date=day,
        )
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_corpus(path: str | Path, max_tokens: int = 400) -> Corpus:
    """Read a JSONL review file.

    Reviews with ``max_tokens`` or more tokens are dropped and counted in
    ``Corpus.rejected``; an empty file yields an empty corpus with a warning.
    """
    out = Corpus()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            review = review_from_record(rec, f"{path}:{lineno}")
            if len(review.text) >= max_tokens:
                out.rejected += 1
                continue
            out.append(review)
    if not out and not out.rejected:
        log.warning("corpus %s is empty", path)
    if out.rejected:
        log.info("rejected %d reviews with >= %d tokens", out.rejected, max_tokens)
    return out


def write_corpus(reviews: Iterable[Review], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reviews:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# scores


def num_categories(reviews: Sequence[Review]) -> int:
    """2 when every score is -1/1 and some are -1, else 5."""
    scores = {r.score for r in reviews}
    return 2 if scores <= {-1, 1} and -1 in scores else 5


def score_to_category(score: int, C: int) -> int:
    if C == 2:
        if score not in (-1, 1):
            raise ValueError(f"binary score must be -1 or 1, got {score}")
        return 0 if score == -1 else 1
    if not 1 <= score <= C:
        raise ValueError(f"score {score} outside 1..{C}")
    return score - 1


def category_to_score(cat: int, C: int) -> int:
    if not 0 <= cat < C:
        raise ValueError(f"category {cat} outside [0, {C})")
    if C == 2:
        return -1 if cat == 0 else 1
    return cat + 1


def normalized_score(cat, C: int):
    """Category mapped to [0, 1]: (s-1)/(C-1) for 5-way, {0, 1} for binary."""
    return np.asarray(cat, dtype=np.float64) / (C - 1)


# ---------------------------------------------------------------------------
# vocabulary and encoding


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = [END, UNK] + [t for t in tokens if t not in (END, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        if token in (END, UNK):
            return UNK_ID
        return self.stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.itos[idx]


def build_vocab(corpus: Sequence[Review], min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Tokens seen at least ``min_freq`` times, most frequent first (ties alphabetical)."""
    if not corpus:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter(tok for r in corpus for tok in r.text)
    kept = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max(0, max_size - 2)]
    return Vocab(kept)


@dataclass
class TokenSeq:
    ids: np.ndarray
    true_length: int

    @property
    def T(self) -> int:
        return len(self.ids)


def encode(review: Review | Sequence[str], vocab: Vocab, T: int) -> TokenSeq:
    tokens = review.text if isinstance(review, Review) else list(review)
    if len(tokens) >= T:
        raise LengthError(f"{len(tokens)} tokens do not fit length {T} (need < T)")
    ids = np.full(T, END_ID, dtype=np.int64)
    ids[: len(tokens)] = [vocab.id(t) for t in tokens]
    return TokenSeq(ids, len(tokens))


def decode(seq: TokenSeq | np.ndarray, vocab: Vocab) -> list[str]:
    """Tokens of the non-END prefix."""
    ids = seq.ids if isinstance(seq, TokenSeq) else np.asarray(seq)
    out = []
    for i in ids:
        if i == END_ID:
            break
        out.append(vocab.token(int(i)))
    return out


def encode_batch(reviews: Sequence[Review], vocab: Vocab, T: int) -> np.ndarray:
    return np.stack([encode(r, vocab, T).ids for r in reviews]) if reviews else np.zeros((0, T), np.int64)


def true_lengths(ids: np.ndarray) -> np.ndarray:
    """Length of the prefix before the first END in each row."""
    ids = np.atleast_2d(ids)
    is_end = ids == END_ID
    first = np.where(is_end.any(axis=1), is_end.argmax(axis=1), ids.shape[1])
    return first


# ---------------------------------------------------------------------------
# embeddings


def load_embeddings(path: str | Path | None, vocab: Vocab, dim: int, seed: int = 0) -> np.ndarray:
    """Embedding matrix with one row per vocabulary id.

    Rows start as seeded uniform draws in [-0.1, 0.1]; tokens present in the
    whitespace-separated text file at ``path`` are overwritten with the file
    vectors. ``path=None`` gives the purely random table.
    """
    if dim <= 0:
        raise ValueError("embedding dim must be positive")
    table = Rng(seed, "embeddings").uniform(-0.1, 0.1, size=(len(vocab), dim))
    if path is None:
        return table
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected token + {dim} values, got {len(parts) - 1} values"
                )
            token = parts[0]
            if token in vocab.stoi and token not in (END, UNK):
                try:
                    table[vocab.stoi[token]] = [float(v) for v in parts[1:]]
                except ValueError:
                    raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric value") from None
    return table


# ---------------------------------------------------------------------------
# behavioural features

FEATURE_NAMES = ("mnr", "rl", "se", "sr")


@dataclass(frozen=True)
class BehavioralVector:
    mnr: float
    rl: float
    se: int
    sr: int

    def as_array(self) -> np.ndarray:
        return np.array([self.mnr, self.rl, self.se, self.sr], dtype=np.float64)


def is_low_score(score: int, C: int) -> int:
    return int(score == -1) if C == 2 else int(score in (1, 2, 3))


def extract_behavioral(corpus: Sequence[Review], C: int = 5) -> dict[str, BehavioralVector]:
    """MNR, RL, SE, SR for every review.

    Only reviews carrying both a user id and a date contribute user evidence;
    the rest get MNR = 0 and SR = 1.
    """
    per_user: Counter = Counter()
    per_user_day: Counter = Counter()
    for r in corpus:
        if r.user_id is not None and r.date is not None:
            per_user[r.user_id] += 1
            per_user_day[(r.user_id, r.date)] += 1
    max_day: dict[str, int] = defaultdict(int)
    for (user, _), n in per_user_day.items():
        max_day[user] = max(max_day[user], n)
    out = {}
    for r in corpus:
        if r.user_id is not None and r.date is not None:
            mnr, sr = max_day[r.user_id], int(per_user[r.user_id] == 1)
        else:
            mnr, sr = 0, 1
        out[r.review_id] = BehavioralVector(float(mnr), float(len(r.text)), is_low_score(r.score, C), sr)
    return out


def bot_behavior(length: int, score: int, C: int) -> BehavioralVector:
    """Features of a generated review: no user trace, so MNR = 0 and SR = 1."""
    return BehavioralVector(0.0, float(length), is_low_score(score, C), 1)


@dataclass
class FeatureScaler:
    """Column-wise min-max scaling to [0, 1]; constant columns map to 0."""

    low: np.ndarray = field(default_factory=lambda: np.zeros(4))
    high: np.ndarray = field(default_factory=lambda: np.ones(4))

    @classmethod
    def fit(cls, rows: np.ndarray) -> "FeatureScaler":
        rows = np.atleast_2d(rows)
        return cls(rows.min(axis=0), rows.max(axis=0))

    def transform(self, rows: np.ndarray) -> np.ndarray:
        span = self.high - self.low
        safe = np.where(span > 0, span, 1.0)
        return np.clip((np.atleast_2d(rows) - self.low) / safe, 0.0, 1.0) * (span > 0)


# ---------------------------------------------------------------------------
# splitting


def split(corpus: Sequence[Review], train_ratio: float, seed: int) -> tuple[list[Review], list[Review]]:
    """Label-stratified split; each partition keeps corpus order."""
    if not 0 < train_ratio < 1:
        raise ValueError("train_ratio must lie strictly between 0 and 1")
    by_label: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(corpus):
        by_label[r.label].append(i)
    rng = Rng(seed, "split")
    train_idx: list[int] = []
    for label in LABELS:
        members = by_label.get(label)
        if not members:
            continue
        if len(members) < 2:
            raise StratificationError(f"label {label!r} has {len(members)} member(s); need >= 2")
        order = [members[j] for j in rng.permutation(len(members))]
        k = min(max(int(round(train_ratio * len(members))), 1), len(members) - 1)
        train_idx.extend(order[:k])
    chosen = set(train_idx)
    train = [r for i, r in enumerate(corpus) if i in chosen]
    test = [r for i, r in enumerate(corpus) if i not in chosen]
    return train, test


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SynthSpec:
    """Shape of a synthetic review corpus.

    Each review carries a latent tone in [0, C) shown through tokens of a
    tone-specific block. With probability ``rho`` its score equals the tone,
    otherwise the score is uniform over all C categories; for C = 2 that makes
    P(score matches tone) = (1 + rho) / 2. Genuine and human-fraud text come
    from different unigram distributions with different bigram successor
    maps that never lead into a tone block; ``bot_fraction`` of the fraud
    reviews come from a flatter, bigram-free "bot" distribution without user
    metadata. Every review holds at least one token of its tone block, so
    with ``rho = 1`` the score is a function of the text.
    """

    vocab_size: int = 200
    min_len: int = 8
    max_len: int = 24
    size: int = 2000
    fraud_fraction: float = 0.3
    rho: float = 0.8
    C: int = 5
    bot_fraction: float = 0.0
    class_token_prob: float = 0.2
    tone_token_prob: float = 0.25
    bigram_prob: float = 0.3
    n_users: int | None = None

    def validate(self) -> None:
        if self.vocab_size < 10:
            raise CorpusError("synthetic vocab_size must be >= 10")
        if not 0 <= self.rho <= 1:
            raise CorpusError("rho must lie in [0, 1]")
        if not 0 <= self.fraud_fraction <= 1 or not 0 <= self.bot_fraction <= 1:
            raise CorpusError("fractions must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("need 1 <= min_len <= max_len")
        if self.C not in (2, 5):
            raise CorpusError("C must be 2 or 5")
        if self.size < 1:
            raise CorpusError("size must be >= 1")

    def blocks(self) -> dict[str, list[int]]:
        """Token-index blocks: one per tone, genuine, fraud, and shared common words."""
        V = self.vocab_size
        tone_w = max(1, V // (4 * self.C))
        class_w = max(1, V // 10)
        cursor = 0
        out: dict[str, list[int]] = {}
        for k in range(self.C):
            out[f"tone{k}"] = list(range(cursor, cursor + tone_w))
            cursor += tone_w
        for name in ("genuine", "fraud"):
            out[name] = list(range(cursor, cursor + class_w))
            cursor += class_w
        out["common"] = list(range(cursor, V))
        if not out["common"]:
            raise CorpusError("vocab_size too small for the block layout")
        return out


def synth_word(i: int) -> str:
    return f"w{i:04d}"


def _zipf(n: int, rng: Rng) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    w = w[rng.permutation(n)]
    return w / w.sum()


def synth_corpus(spec: SynthSpec, seed: int) -> list[Review]:
    spec.validate()
    rng = Rng(seed, "synth")
    blocks = spec.blocks()
    common = np.array(blocks["common"])
    V = spec.vocab_size
    tone_ids = np.concatenate([blocks[f"tone{k}"] for k in range(spec.C)])
    plain = np.setdiff1d(np.arange(V), tone_ids)

    def successors() -> np.ndarray:
        # bigram successors never land in a tone block, so only tone draws carry the tone
        succ = np.empty(V, dtype=np.int64)
        succ[plain] = plain[rng.permutation(len(plain))]
        succ[tone_ids] = plain[rng.integers(0, len(plain), len(tone_ids))]
        return succ

    styles = {
        GENUINE: (np.array(blocks["genuine"]), _zipf(len(common), rng), successors()),
        FRAUD_HUMAN: (np.array(blocks["fraud"]), _zipf(len(common), rng), successors()),
    }
    n_fraud = int(round(spec.size * spec.fraud_fraction))
    n_bot = int(round(n_fraud * spec.bot_fraction))
    labels = np.array([GENUINE] * (spec.size - n_fraud) + [FRAUD_HUMAN] * (n_fraud - n_bot) + [FRAUD_BOT] * n_bot)
    labels = labels[rng.permutation(spec.size)]
    n_users = spec.n_users or max(2, spec.size // 4)
    start = Date(2015, 1, 1)
    last_day: dict[str, Date] = {}

    reviews = []
    for i, label in enumerate(labels):
        tone = int(rng.integers(0, spec.C))
        cat = tone if rng.uniform() < spec.rho else int(rng.integers(0, spec.C))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        tone_block = np.array(blocks[f"tone{tone}"])
        if label == FRAUD_BOT:
            fraud_block = np.array(blocks["fraud"])
            kinds = rng.uniform(size=length)
            ids = np.where(
                kinds < spec.class_token_prob / 2,
                fraud_block[rng.integers(0, len(fraud_block), length)],
                np.where(
                    kinds < spec.class_token_prob / 2 + spec.tone_token_prob,
                    tone_block[rng.integers(0, len(tone_block), length)],
                    common[rng.integers(0, len(common), length)],
                ),
            )
            user, day = None, None
        else:
            class_block, common_w, successor = styles[label]
            ids = np.empty(length, dtype=np.int64)
            for t in range(length):
                u = rng.uniform()
                if t > 0 and u < spec.bigram_prob:
                    ids[t] = successor[ids[t - 1]]
                    continue
                u = rng.uniform()
                if u < spec.class_token_prob:
                    ids[t] = class_block[rng.integers(0, len(class_block))]
                elif u < spec.class_token_prob + spec.tone_token_prob:
                    ids[t] = tone_block[rng.integers(0, len(tone_block))]
                else:
                    ids[t] = common[rng.categorical(common_w[None, :])[0]]
            user = f"u{int(rng.integers(0, n_users)):05d}"
            if label == FRAUD_HUMAN and user in last_day and rng.uniform() < 0.5:
                day = last_day[user]
            else:
                day = start + timedelta(days=int(rng.integers(0, 365)))
            last_day[user] = day
        if not np.isin(ids, tone_block).any():
            ids[int(rng.integers(0, length))] = tone_block[rng.integers(0, len(tone_block))]
        reviews.append(
            Review(
                review_id=f"r{i:06d}",
                text=[synth_word(int(j)) for j in ids],
                score=category_to_score(cat, spec.C),
                label=str(label),
                user_id=user,
                item_id=f"i{int(rng.integers(0, max(1, spec.size // 10))):05d}",
                date=day,
            )
        )
    return reviews


# ---------------------------------------------------------------------------
# external CSV layouts

_YELP_LABELS = {"y": "fraud", "n": "genuine", "-1": "fraud", "1": "genuine",
                "fraud": "fraud", "genuine": "genuine", "spam": "fraud", "ham": "genuine"}
_TRIP_LABELS = {"deceptive": "fraud", "truthful": "genuine", "fraud": "fraud", "genuine": "genuine"}
_TRIP_SCORES = {"positive": 1, "like": 1, "1": 1, "negative": -1, "dislike": -1, "-1": -1}

LAYOUTS = ("yelp", "tripadvisor")


def convert_csv(src: str | Path, dst: str | Path, layout: str) -> int:
    """Map a Yelp-like or TripAdvisor-like CSV onto the canonical JSONL.

    yelp columns: review_id, user_id, item_id, date, rating, label, text
      (label Y/N, -1/1, fraud/genuine).
    tripadvisor columns: deceptive, hotel, polarity, text
      (deceptive truthful/deceptive, polarity positive/negative).
    Returns the number of rows written.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    n = 0
    with open(src, newline="", encoding="utf-8") as fin, open(dst, "w", encoding="utf-8") as fout:
        for rowno, row in enumerate(csv.DictReader(fin), start=2):
            row = {k.strip().lower(): (v or "").strip() for k, v in row.items() if k}
            try:
                if layout == "yelp":
                    rec = {
                        "review_id": row.get("review_id") or f"row{rowno}",
                        "text": row["text"],
                        "score": int(float(row["rating"])),
                        "label": _YELP_LABELS[row["label"].lower()],
                    }
                    for key in ("user_id", "item_id", "date"):
                        if row.get(key):
                            rec[key] = row[key]
                else:
                    rec = {
                        "review_id": row.get("review_id") or f"row{rowno}",
                        "text": row["text"],
                        "score": _TRIP_SCORES[row["polarity"].lower()],
                        "label": _TRIP_LABELS[row["deceptive"].lower()],
                    }
                    if row.get("hotel"):
                        rec["item_id"] = row["hotel"]
            except (KeyError, ValueError) as exc:
                raise CorpusError(f"{src}:{rowno}: cannot map row ({exc})") from None
            review_from_record(rec, f"{src}:{rowno}")
            fout.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n

