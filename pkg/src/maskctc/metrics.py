"""Error rates by Levenshtein alignment and inference cost summaries."""
import json
import statistics
from dataclasses import dataclass


@dataclass(frozen=True)
class EditCounts:
    sub: int
    dele: int
    ins: int

    @property
    def total(self):
        return self.sub + self.dele + self.ins

    def as_dict(self):
        return {"sub": self.sub, "del": self.dele, "ins": self.ins, "total": self.total}


def edit_distance(hyp, ref) -> EditCounts:
    """Unit-cost alignment of ``hyp`` against ``ref``.

    Deletions are reference tokens missing from the hypothesis; insertions
    are hypothesis tokens with no reference counterpart.
    """
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    # cell holds (total, sub, del, ins); tuple order breaks ties toward fewer total edits
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            d, s, dl, ins = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (d, s, dl, ins)
            else:
                diag = (d + 1, s + 1, dl, ins)
            up = prev[j]
            up = (up[0] + 1, up[1], up[2] + 1, up[3])
            left = cur[j - 1]
            left = (left[0] + 1, left[1], left[2], left[3] + 1)
            cur.append(min(diag, up, left, key=lambda c: c[0]))
        prev = cur
    total, s, dl, ins = prev[m]
    return EditCounts(s, dl, ins)


def error_rate(hyps, refs):
    """Corpus-level (S + D + I) / N, with N floored at 1."""
    hyps, refs = list(hyps), list(refs)
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    errs = sum(edit_distance(h, r).total for h, r in zip(hyps, refs))
    n = sum(len(r) for r in refs)
    return errs / max(1, n)


def score_corpus(hyps, refs):
    hyps, refs = list(hyps), list(refs)
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference counts differ")
    s = dl = ins = 0
    for h, r in zip(hyps, refs):
        c = edit_distance(h, r)
        s, dl, ins = s + c.sub, dl + c.dele, ins + c.ins
    n = sum(len(r) for r in refs)
    return {
        "utterances": len(refs),
        "ref_tokens": n,
        "sub": s,
        "del": dl,
        "ins": ins,
        "errors": s + dl + ins,
        "error_rate": (s + dl + ins) / max(1, n),
    }


def timing_report(runs):
    """Summarise decode cost per strategy.

    ``runs`` maps strategy name to ``(traces, wall_times)``; ``wall_times``
    are per-repeat seconds for decoding the whole corpus once.
    """
    report = {}
    for name, (traces, times) in runs.items():
        times = list(times)
        report[name] = {
            "repeats": len(times),
            "mean_s": statistics.fmean(times) if times else 0.0,
            "median_s": statistics.median(times) if times else 0.0,
            "std_s": statistics.pstdev(times) if len(times) > 1 else 0.0,
            "utterances": len(traces),
            "decoder_forwards": sum(t.decoder_forward_count for t in traces),
            "encoder_forwards": sum(t.encoder_forward_count for t in traces),
            "max_decoder_forwards": max((t.decoder_forward_count for t in traces), default=0),
        }
    return report


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


def report_table(report):
    cols = ["strategy", "mean_s", "median_s", "std_s", "dec_fwd", "enc_fwd", "max_dec/utt"]
    rows = [cols]
    for name, r in report.items():
        rows.append([
            name,
            f"{r['mean_s']:.4f}",
            f"{r['median_s']:.4f}",
            f"{r['std_s']:.4f}",
            str(r["decoder_forwards"]),
            str(r["encoder_forwards"]),
            str(r["max_decoder_forwards"]),
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
