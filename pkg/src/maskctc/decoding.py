"""Inference strategies on top of a trained model.

All strategies start from one encoder pass. ``ctc_greedy`` stops at the
best-path CTC output; the others refine it (or, for ``mask_predict``, an
all-mask sequence) with the masked-token decoder and record every decoder
call in a :class:`DecodeTrace`.
"""
import json
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
import torch

from .ctc import CtcGreedyResult, greedy_decode

STRATEGIES = ("ctc_greedy", "maskctc", "shrink_expand", "mask_predict", "restricted_mp")

DEFAULT_P_THRES = {"shrink_expand": 0.5}
FALLBACK_P_THRES = 0.99


@dataclass
class DecodeConfig:
    strategy: str = "maskctc"
    K: int = 10
    p_thres: Optional[float] = None
    max_loop: Optional[int] = None
    confidence: str = "max"
    recompute_c: bool = False
    target_len: Optional[int] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.p_thres is None:
            self.p_thres = DEFAULT_P_THRES.get(self.strategy, FALLBACK_P_THRES)
        if not 0.0 <= self.p_thres <= 1.0:
            raise ValueError("p_thres must lie in [0, 1]")
        if self.max_loop is None:
            self.max_loop = 2 * self.K
        if self.max_loop < 1:
            raise ValueError("max_loop must be >= 1")


@dataclass
class DecodeTrace:
    strategy: str
    iterations: List[dict] = field(default_factory=list)
    decoder_forward_count: int = 0
    encoder_forward_count: int = 0
    initial_masks: int = 0
    forced_fill: bool = False
    utt_id: Optional[str] = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        for it in d.get("iterations", []):
            it["filled"] = [tuple(f) for f in it.get("filled", [])]
        return cls(**d)


class _Decoder:
    """Counts decoder passes for one utterance; every call is one forward."""

    def __init__(self, model, enc, trace):
        self.model = model
        self.enc = enc
        self.trace = trace

    def token_log_probs(self, tokens):
        with torch.no_grad():
            states = self.model.decoder_states(self.enc, tokens)
            out = self.model.mlm_head(states).numpy()
        self.trace.decoder_forward_count += 1
        return out

    def length_log_probs(self, tokens):
        with torch.no_grad():
            states = self.model.decoder_states(self.enc, tokens)
            out = self.model.length_head(states).numpy()
        self.trace.decoder_forward_count += 1
        return out


def _best(log_probs, positions):
    """Argmax token and its probability at each position."""
    rows = log_probs[positions]
    toks = rows.argmax(axis=1)
    return toks, np.exp(rows[np.arange(len(positions)), toks])


def _top(positions, probs, c):
    """The ``c`` positions with highest probability; ties go to the earlier position."""
    order = sorted(range(len(positions)), key=lambda i: (-probs[i], positions[i]))
    return sorted(order[:c])


def _masked(tokens, mask_id):
    return [i for i, t in enumerate(tokens) if t == mask_id]


def shrink(tokens, mask_id):
    """Collapse every run of consecutive masks into a single mask."""
    out = []
    for t in tokens:
        if t == mask_id and out and out[-1] == mask_id:
            continue
        out.append(t)
    return out


def expand(tokens, lengths, mask_id):
    """Replace the i-th mask by ``lengths[i]`` masks (0 deletes it)."""
    out = []
    k = 0
    for t in tokens:
        if t == mask_id:
            out.extend([mask_id] * int(lengths[k]))
            k += 1
        else:
            out.append(t)
    if k != len(lengths):
        raise ValueError("one length per mask required")
    return out


def _confidence_mask(ctc_result, p_thres, mask_id):
    return [mask_id if c < p_thres else t for t, c in zip(ctc_result.tokens, ctc_result.confidences)]


def decode_maskctc(model, enc, ctc_result: CtcGreedyResult, cfg: DecodeConfig, trace=None):
    """Mask low-confidence CTC tokens, then fill the most probable ``C`` masks per pass."""
    trace = trace or DecodeTrace(cfg.strategy)
    mask_id = model.vocab.mask_id
    tokens = _confidence_mask(ctc_result, cfg.p_thres, mask_id)
    n_mask = len(_masked(tokens, mask_id))
    trace.initial_masks = n_mask
    if n_mask == 0:
        return tokens, trace
    dec = _Decoder(model, enc, trace)
    c = max(1, n_mask // cfg.K)
    for it in range(cfg.K):
        masked = _masked(tokens, mask_id)
        if not masked:
            break
        lp = dec.token_log_probs(tokens)
        toks, probs = _best(lp, masked)
        chosen = range(len(masked)) if it == cfg.K - 1 else _top(masked, probs, c)
        filled = []
        for i in chosen:
            tokens[masked[i]] = int(toks[i])
            filled.append((masked[i], int(toks[i]), float(probs[i])))
        trace.iterations.append({"masked_positions": masked, "length_predictions": [], "filled": filled})
    return tokens, trace


def decode_shrink_expand(model, enc, ctc_result: CtcGreedyResult, cfg: DecodeConfig, trace=None):
    """Decoder-scored masking, then repeated shrink / length-predict / expand / fill."""
    trace = trace or DecodeTrace(cfg.strategy)
    mask_id = model.vocab.mask_id
    tokens = list(ctc_result.tokens)
    if not tokens:
        return tokens, trace
    dec = _Decoder(model, enc, trace)

    lp = dec.token_log_probs(tokens)
    scores = np.exp(lp[np.arange(len(tokens)), tokens])
    tokens = [mask_id if p < cfg.p_thres else t for t, p in zip(tokens, scores)]
    n_mask = len(_masked(tokens, mask_id))
    trace.initial_masks = n_mask
    c = max(1, n_mask // cfg.K)
    # runaway guard: the hypothesis never grows past twice the CTC output length
    max_total = 2 * len(tokens)

    for it in range(cfg.max_loop):
        if not _masked(tokens, mask_id):
            break
        tokens = shrink(tokens, mask_id)
        masked = _masked(tokens, mask_id)
        llp = dec.length_log_probs(tokens)
        wanted = llp[masked].argmax(axis=1)
        budget = max_total - (len(tokens) - len(masked))
        lengths = []
        for d in wanted:
            d = int(min(d, budget))
            lengths.append(d)
            budget -= d
        tokens = expand(tokens, lengths, mask_id)
        record = {"masked_positions": masked, "length_predictions": lengths, "filled": []}
        trace.iterations.append(record)

        masked = _masked(tokens, mask_id)
        if not masked:
            break
        lp = dec.token_log_probs(tokens)
        toks, probs = _best(lp, masked)
        if cfg.recompute_c:
            c = max(1, len(masked) // cfg.K)
        last = it == cfg.max_loop - 1
        if last and len(masked) > c:
            trace.forced_fill = True
        chosen = range(len(masked)) if last else _top(masked, probs, c)
        for i in chosen:
            tokens[masked[i]] = int(toks[i])
            record["filled"].append((masked[i], int(toks[i]), float(probs[i])))
    return tokens, trace


def _mask_predict_loop(dec, tokens, probs, mask_id, K, budget, trace):
    """Re-mask the least confident ``min(budget, L*(K-k)/K)`` positions and re-predict, k = 1..K-1."""
    L = len(tokens)
    for k in range(1, K):
        n = min(budget, (L * (K - k)) // K)
        if n <= 0:
            break
        order = sorted(range(L), key=lambda i: (probs[i], i))
        remask = sorted(order[:n])
        for i in remask:
            tokens[i] = mask_id
        lp = dec.token_log_probs(tokens)
        toks, p = _best(lp, remask)
        filled = []
        for j, i in enumerate(remask):
            tokens[i] = int(toks[j])
            probs[i] = float(p[j])
            filled.append((i, int(toks[j]), float(p[j])))
        trace.iterations.append({"masked_positions": remask, "length_predictions": [], "filled": filled})
    return tokens


def _fill_all(dec, tokens, probs, mask_id, trace):
    masked = _masked(tokens, mask_id)
    lp = dec.token_log_probs(tokens)
    toks, p = _best(lp, masked)
    filled = []
    for j, i in enumerate(masked):
        tokens[i] = int(toks[j])
        probs[i] = float(p[j])
        filled.append((i, int(toks[j]), float(p[j])))
    trace.iterations.append({"masked_positions": masked, "length_predictions": [], "filled": filled})


def decode_mask_predict(model, enc, target_len: int, cfg: DecodeConfig, trace=None):
    """Start from ``target_len`` masks; predict all, then re-mask on a shrinking schedule."""
    trace = trace or DecodeTrace(cfg.strategy)
    if target_len < 1:
        raise ValueError("mask_predict needs target_len >= 1")
    mask_id = model.vocab.mask_id
    tokens = [mask_id] * int(target_len)
    probs = [0.0] * len(tokens)
    trace.initial_masks = len(tokens)
    dec = _Decoder(model, enc, trace)
    _fill_all(dec, tokens, probs, mask_id, trace)
    return _mask_predict_loop(dec, tokens, probs, mask_id, cfg.K, len(tokens), trace), trace


def decode_restricted_mp(model, enc, ctc_result: CtcGreedyResult, cfg: DecodeConfig, trace=None):
    """Mask-predict from the confidence-filtered CTC output, never re-masking more than the initial mask count."""
    trace = trace or DecodeTrace(cfg.strategy)
    mask_id = model.vocab.mask_id
    tokens = _confidence_mask(ctc_result, cfg.p_thres, mask_id)
    n_mask = len(_masked(tokens, mask_id))
    trace.initial_masks = n_mask
    if n_mask == 0:
        return tokens, trace
    probs = [float(c) for c in ctc_result.confidences]
    dec = _Decoder(model, enc, trace)
    _fill_all(dec, tokens, probs, mask_id, trace)
    return _mask_predict_loop(dec, tokens, probs, mask_id, cfg.K, n_mask, trace), trace


def recognize(model, features, cfg: DecodeConfig, utt_id=None):
    """Full inference for one utterance: returns (tokens, trace, ctc_result)."""
    was_training = model.training
    model.eval()
    trace = DecodeTrace(cfg.strategy, utt_id=utt_id)
    try:
        with torch.no_grad():
            enc = model.encode(features)
            trace.encoder_forward_count += 1
            ctc_result = greedy_decode(model.ctc_head(enc), confidence=cfg.confidence)
        if cfg.strategy == "ctc_greedy":
            tokens = list(ctc_result.tokens)
        elif cfg.strategy == "maskctc":
            tokens, trace = decode_maskctc(model, enc, ctc_result, cfg, trace)
        elif cfg.strategy == "shrink_expand":
            tokens, trace = decode_shrink_expand(model, enc, ctc_result, cfg, trace)
        elif cfg.strategy == "restricted_mp":
            tokens, trace = decode_restricted_mp(model, enc, ctc_result, cfg, trace)
        else:
            n = cfg.target_len if cfg.target_len is not None else len(ctc_result.tokens)
            tokens = decode_mask_predict(model, enc, n, cfg, trace)[0] if n > 0 else []
    finally:
        model.train(was_training)
    return tokens, trace, ctc_result


def benchmark(model, features, cfgs, repeats=3, warmup=10):
    """Wall-clock each decoding config over the whole corpus ``repeats`` times.

    Configs are run round-robin within each repeat so drift hits all of them
    alike, after ``warmup`` untimed utterances per config. Returns
    ``{name: (traces, times)}`` as consumed by ``metrics.timing_report``.
    """
    for cfg in cfgs.values():
        for x in features[:warmup]:
            recognize(model, x, cfg)
    runs = {name: ([], []) for name in cfgs}
    for _ in range(repeats):
        for name, cfg in cfgs.items():
            t0 = time.perf_counter()
            traces = [recognize(model, x, cfg)[1] for x in features]
            runs[name][1].append(time.perf_counter() - t0)
            runs[name] = (traces, runs[name][1])
    return runs
