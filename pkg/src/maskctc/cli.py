"""Command line entry point: ``maskctc {gen,train,avg,decode,eval,bench}``.

Exit codes: 0 success, 1 usage or config error, 2 data error (missing or
mismatched files, corrupt checkpoints).
"""
import argparse
import json
import logging
import os
import sys

from . import config as cfgmod
from .decoding import STRATEGIES, DecodeConfig, benchmark, recognize
from .metrics import report_json, report_table, score_corpus, timing_report
from .model import CheckpointError, Vocabulary, average_checkpoints, load_checkpoint, save_checkpoint
from .synthdata import SynthConfig, generate_corpus, load_corpus, load_corpus_config, save_corpus
from .training import TrainConfig, Trainer

log = logging.getLogger("maskctc")

SWEEP_K = (0, 1, 5, 10)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects KEY=VALUE, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- hypothesis files ----------------------------------------------------------


def write_hyps(path, items, vocab: Vocabulary):
    with open(path, "w") as fh:
        for utt_id, tokens in items:
            fh.write(" ".join([utt_id] + [vocab.symbol(t) for t in tokens]) + "\n")


def read_token_file(path):
    """``id tok tok ...`` lines -> ordered {id: [symbols]}."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] in out:
                raise DataError(f"{path}:{n}: duplicate id {parts[0]!r}")
            out[parts[0]] = parts[1:]
    return out


def _references(path):
    if os.path.isdir(path):
        cfg = load_corpus_config(path)
        utts = load_corpus(path)
        size = cfg.vocab_size if cfg else 1 + max((t for u in utts for t in u.reference), default=0)
        vocab = Vocabulary.of_size(size)
        return {u.id: [vocab.symbol(t) for t in u.reference] for u in utts}
    return read_token_file(path)


def _corpus(path):
    if not os.path.isdir(path) or not os.path.exists(os.path.join(path, "manifest.jsonl")):
        raise DataError(f"no corpus at {path}")
    return load_corpus(path), load_corpus_config(path)


def _checkpoint(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# -- subcommands -----------------------------------------------------------------


def cmd_gen(args):
    over = _overrides(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = cfgmod.load(args.config, SynthConfig, over)
    utts = generate_corpus(cfg, args.n, prefix=args.prefix)
    save_corpus(utts, args.out, cfg)
    print(f"wrote {len(utts)} utterances to {args.out}")


def cmd_train(args):
    over = _overrides(args.set)
    for k in ("epochs", "seed"):
        if getattr(args, k) is not None:
            over[k] = getattr(args, k)
    if args.resume:
        base = dict(_checkpoint(args.resume).meta.get("train_config", {}))
        if args.config:
            with open(args.config) as fh:
                base.update(cfgmod.parse_text(fh.read(), TrainConfig))
        cfg = cfgmod.build(TrainConfig, base, over)
    else:
        cfg = cfgmod.load(args.config, TrainConfig, over)
    utts, syn = _corpus(args.corpus)
    vocab_size = args.vocab_size or (syn.vocab_size if syn else None)
    if vocab_size is None:
        raise UsageError("corpus has no config.json; pass --vocab-size")
    bad = [u.id for u in utts if any(not 0 <= t < vocab_size for t in u.reference)]
    if bad:
        raise DataError(f"{len(bad)} utterances use tokens outside a vocabulary of {vocab_size} (first: {bad[0]})")
    dims = {u.features.shape[1] for u in utts}
    if len(dims) != 1:
        raise DataError(f"inconsistent feature dims {sorted(dims)}")
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        trainer = Trainer.resume(args.resume, cfg, out_dir=args.out)
    else:
        trainer = Trainer(cfg, Vocabulary.of_size(vocab_size), dims.pop(), args.out)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(cfgmod.dump(trainer.cfg))
    trainer.fit(utts)
    with open(os.path.join(args.out, "train_log.jsonl"), "w") as fh:
        for rec in trainer.history:
            fh.write(json.dumps(rec) + "\n")
    final = os.path.join(args.out, "model.ckpt")
    save_checkpoint(final, trainer.averaged())
    print(f"trained {trainer.epoch} epochs; averaged model at {final}")


def cmd_avg(args):
    ckpts = [_checkpoint(p) for p in args.checkpoints]
    save_checkpoint(args.out, average_checkpoints(ckpts))
    print(f"averaged {len(ckpts)} checkpoints into {args.out}")


def _decode_config(strategy, K, args):
    if K == 0:
        return DecodeConfig("ctc_greedy", K=1)
    return DecodeConfig(
        strategy,
        K=K,
        p_thres=args.p_thres,
        max_loop=args.max_loop,
        recompute_c=args.recompute_c,
        target_len=args.target_len,
    )


def _run_decode(model, utts, dcfg):
    hyps, traces = [], []
    for u in utts:
        tokens, trace, _ = recognize(model, u.features, dcfg, utt_id=u.id)
        hyps.append((u.id, tokens))
        traces.append(trace)
    return hyps, traces


def cmd_decode(args):
    ckpt = _checkpoint(args.checkpoint)
    utts, _ = _corpus(args.corpus)
    model = ckpt.build().eval()
    dim = ckpt.config.input_dim
    if any(u.features.shape[1] != dim for u in utts):
        raise DataError(f"corpus feature dim does not match the model's {dim}")
    ks = SWEEP_K if args.sweep else (args.K,)
    for K in ks:
        try:
            dcfg = _decode_config(args.strategy, K, args)
        except ValueError as e:
            raise UsageError(str(e)) from e
        hyps, traces = _run_decode(model, utts, dcfg)
        out = f"{args.out}.K{K}" if args.sweep else args.out
        write_hyps(out, hyps, model.vocab)
        trace_path = args.trace or out + ".trace.jsonl"
        if args.sweep:
            trace_path = out + ".trace.jsonl"
        with open(trace_path, "w") as fh:
            for t in traces:
                fh.write(t.to_json() + "\n")
        masks = sum(t.initial_masks for t in traces)
        print(f"K={K} strategy={dcfg.strategy} initial_masks={masks} -> {out}")


def cmd_eval(args):
    hyp = read_token_file(args.hyp)
    ref = _references(args.ref)
    if set(hyp) != set(ref):
        missing, extra = sorted(set(ref) - set(hyp)), sorted(set(hyp) - set(ref))
        raise DataError(f"id mismatch: {len(missing)} missing, {len(extra)} unexpected")
    ids = list(ref)
    report = score_corpus([hyp[i] for i in ids], [ref[i] for i in ids])
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_bench(args):
    ckpt = _checkpoint(args.checkpoint)
    utts, _ = _corpus(args.corpus)
    if args.n:
        utts = utts[: args.n]
    model = ckpt.build().eval()
    cfgs = {}
    for name in args.strategies.split(","):
        name = name.strip()
        try:
            cfgs[name] = DecodeConfig(name, K=args.K, p_thres=args.p_thres)
        except ValueError as e:
            raise UsageError(str(e)) from e
    runs = benchmark(model, [u.features for u in utts], cfgs, repeats=args.repeats)
    report = timing_report(runs)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(report_json(report) + "\n")
    print(report_table(report))


# -- wiring ------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="maskctc", description="Mask-CTC toy recognizer: data, training, decoding, scoring.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int)
    g.add_argument("--prefix", default="utt")
    g.add_argument("--config")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train with the joint objective")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--vocab-size", type=int)
    t.add_argument("--resume")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("avg", help="average checkpoints")
    a.add_argument("--out", required=True)
    a.add_argument("checkpoints", nargs="+")
    a.set_defaults(func=cmd_avg)

    d = sub.add_parser("decode", help="decode a corpus")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--strategy", default="maskctc")
    d.add_argument("--K", type=int, default=10)
    d.add_argument("--p-thres", type=float)
    d.add_argument("--max-loop", type=int)
    d.add_argument("--recompute-c", action="store_true")
    d.add_argument("--target-len", type=int)
    d.add_argument("--trace")
    d.add_argument("--sweep", action="store_true", help=f"decode with K in {SWEEP_K} (K=0 is CTC greedy)")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("eval", help="score hypotheses against references")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True, help="token file or corpus directory")
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time decoding strategies")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--strategies", default="ctc_greedy,maskctc,shrink_expand")
    b.add_argument("--K", type=int, default=10)
    b.add_argument("--p-thres", type=float)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--n", type=int, default=100)
    b.add_argument("--json")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return 1
        if getattr(args, "strategy", None) and args.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {args.strategy!r}; choose from {', '.join(STRATEGIES)}")
        args.func(args)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"maskctc: error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"maskctc: data error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
