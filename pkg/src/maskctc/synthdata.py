"""Synthetic utterances with CTC-like structure.

Each token has a fixed prototype feature vector that is repeated for a few
frames; zero-vector silence may sit between tokens; Gaussian noise is added on
top. References follow a sparse random Markov chain so the token decoder has
context worth learning.

Two knobs deliberately break the clean mapping to stress length recovery:
``short_prob`` renders a token for a single frame (tends to vanish after
downsampling) and ``stutter_prob`` renders a token twice around a silence
gap (tends to be emitted twice).
"""
import json
import os
from dataclasses import asdict, dataclass
from typing import List

import numpy as np

from .numerics import Rng


@dataclass
class SynthConfig:
    vocab_size: int = 10
    min_len: int = 3
    max_len: int = 10
    dup_min: int = 2
    dup_max: int = 4
    silence_max: int = 2
    min_repeat_gap: int = 2
    noise_std: float = 0.1
    feature_dim: int = 16
    successors: int = 3
    short_prob: float = 0.0
    stutter_prob: float = 0.0
    world_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.dup_min < 1 or self.dup_max < self.dup_min:
            raise ValueError("need 1 <= dup_min <= dup_max")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not (0.0 <= self.short_prob <= 1.0 and 0.0 <= self.stutter_prob <= 1.0):
            raise ValueError("stress probabilities must lie in [0, 1]")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    reference: List[int]

    @property
    def num_frames(self):
        return self.features.shape[0]


class World:
    """Token prototypes and successor distribution shared by every corpus with one ``world_seed``."""

    def __init__(self, cfg: SynthConfig):
        rng = Rng(cfg.world_seed)
        V = cfg.vocab_size
        self.prototypes = rng.normal(size=(V, cfg.feature_dim))
        self.transitions = np.zeros((V, V))
        k = min(cfg.successors, max(V - 1, 1))
        for a in range(V):
            others = [b for b in range(V) if b != a] or [a]
            nxt = [others[i] for i in rng.choice(len(others), size=k, replace=False)]
            w = rng.uniform(0.5, 1.5, size=k)
            self.transitions[a, nxt] = w / w.sum()

    def sample_tokens(self, length, rng):
        V = self.transitions.shape[0]
        y = [int(rng.integers(0, V))]
        cdf = np.cumsum(self.transitions, axis=1)
        while len(y) < length:
            u = rng.uniform()
            y.append(int(min(np.searchsorted(cdf[y[-1]], u, side="right"), V - 1)))
        return y


def render(reference, world: World, cfg: SynthConfig, rng):
    """Frames for one reference; returns (features, per-token frame counts)."""
    D = cfg.feature_dim
    frames = []
    silence = np.zeros(D)
    for i, tok in enumerate(reference):
        if i > 0:
            gap = int(rng.integers(0, cfg.silence_max + 1))
            if tok == reference[i - 1]:
                gap = max(gap, cfg.min_repeat_gap)
            frames.extend([silence] * gap)
        dup = int(rng.integers(cfg.dup_min, cfg.dup_max + 1))
        if cfg.short_prob and rng.uniform() < cfg.short_prob:
            dup = 1
        if cfg.stutter_prob and rng.uniform() < cfg.stutter_prob:
            frames.extend([world.prototypes[tok]] * dup)
            frames.extend([silence] * max(cfg.min_repeat_gap, 1))
        frames.extend([world.prototypes[tok]] * dup)
    x = np.array(frames, dtype=np.float64)
    if cfg.noise_std > 0:
        x = x + rng.normal(size=x.shape, scale=cfg.noise_std)
    return x


def generate_corpus(cfg: SynthConfig, n: int, prefix="utt") -> List[Utterance]:
    if n < 1:
        raise ValueError("n must be >= 1")
    world = World(cfg)
    rng = Rng(cfg.seed)
    out = []
    for i in range(n):
        L = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        y = world.sample_tokens(L, rng)
        out.append(Utterance(f"{prefix}{i:06d}", render(y, world, cfg, rng), y))
    return out


def corrupt_reference(y, rng, n_sub=0, n_del=0, n_ins=0, vocab_size=None):
    """Apply exactly the requested substitutions, deletions and insertions.

    Substituted and deleted positions are disjoint. Replacement and inserted
    tokens are taken from types absent in ``y`` when the vocabulary has any,
    and insertions avoid the gaps left by deletions. The edit distance to ``y``
    is at most ``n_sub + n_del + n_ins``; it is exact when fresh types exist
    and deletions and insertions are not mixed (a deletion plus an insertion
    can always be rewritten as substitutions).
    """
    y = [int(t) for t in y]
    V = vocab_size if vocab_size is not None else (max(y) + 1 if y else 1)
    if min(n_sub, n_del, n_ins) < 0:
        raise ValueError("edit counts must be non-negative")
    if n_sub + n_del > len(y):
        raise ValueError("more substitutions + deletions than tokens")
    if n_sub and V < 2:
        raise ValueError("substitution needs at least two token types")
    fresh = [v for v in range(V) if v not in set(y)]

    def draw(exclude):
        pool = [v for v in fresh if v not in exclude] or [v for v in range(V) if v not in exclude] or list(range(V))
        return pool[int(rng.integers(0, len(pool)))]

    picked = [int(p) for p in rng.choice(len(y), size=n_sub + n_del, replace=False)] if n_sub + n_del else []
    subs, dels = set(picked[:n_sub]), set(picked[n_sub:])
    out, blocked = [], set()
    for i, t in enumerate(y):
        if i in dels:
            blocked.add(len(out))
            continue
        out.append(draw({t}) if i in subs else t)
    for _ in range(n_ins):
        gaps = [g for g in range(len(out) + 1) if g not in blocked] or list(range(len(out) + 1))
        g = gaps[int(rng.integers(0, len(gaps)))]
        near = {out[g - 1] if g > 0 else None, out[g] if g < len(out) else None}
        out.insert(g, draw(near))
        blocked = {b + 1 if b >= g else b for b in blocked}
    return out


def save_corpus(utts: List[Utterance], directory, cfg: SynthConfig = None):
    """Write ``manifest.jsonl`` plus one packed little-endian float64 ``features.bin``."""
    os.makedirs(directory, exist_ok=True)
    offset = 0
    with open(os.path.join(directory, "features.bin"), "wb") as fb, open(
        os.path.join(directory, "manifest.jsonl"), "w"
    ) as fm:
        for u in utts:
            raw = np.ascontiguousarray(u.features, dtype="<f8").tobytes()
            fb.write(raw)
            rec = {"id": u.id, "reference": list(map(int, u.reference)), "offset": offset,
                   "frames": int(u.features.shape[0]), "dim": int(u.features.shape[1])}
            fm.write(json.dumps(rec) + "\n")
            offset += len(raw)
    if cfg is not None:
        with open(os.path.join(directory, "config.json"), "w") as fc:
            json.dump(asdict(cfg), fc, indent=2, sort_keys=True)


def load_corpus(directory) -> List[Utterance]:
    with open(os.path.join(directory, "features.bin"), "rb") as fb:
        blob = fb.read()
    utts = []
    with open(os.path.join(directory, "manifest.jsonl")) as fm:
        for line in fm:
            if not line.strip():
                continue
            rec = json.loads(line)
            n = rec["frames"] * rec["dim"]
            x = np.frombuffer(blob, dtype="<f8", count=n, offset=rec["offset"]).reshape(rec["frames"], rec["dim"])
            utts.append(Utterance(rec["id"], x.astype(np.float64), [int(t) for t in rec["reference"]]))
    return utts


def load_corpus_config(directory):
    path = os.path.join(directory, "config.json")
    if not os.path.exists(path):
        return None
    with open(path) as fc:
        return SynthConfig(**json.load(fc))
