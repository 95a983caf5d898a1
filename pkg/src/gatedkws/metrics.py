"""Event matching and the detection / localization / efficiency report."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .decoder import Proposal
from .encoder import MacLedger, NoDataError, mac_report
from .supervision import GroundTruthEvent

BETA_TWV = 999.9  # (C/V) * (1/P_term - 1) with C/V = 0.1, P_term = 1e-4


def _iou(p: Proposal, g: GroundTruthEvent) -> float:
    inter = min(p.e_hat, g.e) - max(p.b_hat, g.b)
    if inter <= 0:
        return 0.0
    return inter / (max(p.e_hat, g.e) - min(p.b_hat, g.b))


@dataclass
class MatchResult:
    tp_pairs: list = field(default_factory=list)  # (Proposal, GroundTruthEvent, iou)
    fps: list = field(default_factory=list)
    fns: list = field(default_factory=list)

    def extend(self, other: "MatchResult") -> "MatchResult":
        self.tp_pairs += other.tp_pairs
        self.fps += other.fps
        self.fns += other.fns
        return self


def match_events(proposals, ground_truths) -> MatchResult:
    """Greedy one-to-one matching, highest score first, to the same-class truth with best IOU > 0."""
    gts = list(ground_truths)
    used = [False] * len(gts)
    res = MatchResult()
    for p in sorted(proposals, key=lambda p: (-p.score, p.b_hat, p.class_id, p.e_hat)):
        best, best_iou = -1, 0.0
        for i, g in enumerate(gts):
            if used[i] or g.class_id != p.class_id:
                continue
            v = _iou(p, g)
            if v > best_iou:
                best, best_iou = i, v
        if best < 0:
            res.fps.append(p)
        else:
            used[best] = True
            res.tp_pairs.append((p, gts[best], best_iou))
    res.fns = [g for g, u in zip(gts, used) if not u]
    return res


def match_dataset(proposals: dict, ground_truths: dict) -> MatchResult:
    """Match per utterance id and pool the results."""
    total = MatchResult()
    for uid in sorted(set(proposals) | set(ground_truths)):
        total.extend(match_events(proposals.get(uid, []), ground_truths.get(uid, [])))
    return total


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    actual: float
    avg_iou: float
    frr: float
    far_per_s: float
    mtwv: float
    skip_fraction: float
    skip_fraction_whole_encoder: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def table_row(self) -> dict:
        """Column names as in the usual KWS results table."""
        return {
            "FRR": self.frr,
            "FAR": self.far_per_s,
            "Precision": self.precision,
            "Recall": self.recall,
            "F1": self.f1,
            "Actual": self.actual,
            "IOU": self.avg_iou,
            "MTWV": self.mtwv,
            "Skips [%]": 100.0 * self.skip_fraction,
        }


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(f"{name}: zero denominator")
        return 0.0
    return num / den


def compute_report(match: MatchResult, total_audio_s: float, ledger: MacLedger | None = None, mtwv: float = 0.0, actual_iou: float = 0.5) -> MetricReport:
    if not total_audio_s > 0:
        raise ValueError(f"total_audio_s must be positive, got {total_audio_s}")
    tp, fp, fn = len(match.tp_pairs), len(match.fps), len(match.fns)
    flags: list[str] = []
    p = _ratio(tp, tp + fp, "precision", flags)
    r = _ratio(tp, tp + fn, "recall", flags)
    f1 = _ratio(2 * p * r, p + r, "f1", flags)
    ious = [iou for _, _, iou in match.tp_pairs]
    avg_iou = _ratio(sum(ious), len(ious), "avg_iou", flags)
    actual = _ratio(sum(1 for v in ious if v > actual_iou), tp + fn, "actual", flags)
    frr = _ratio(fn, fn + tp, "frr", flags)
    skip = skip_whole = 0.0
    if ledger is not None:
        try:
            rep = mac_report(ledger)
            skip, skip_whole = rep["skip_fraction_gateable"], rep["skip_fraction_whole_encoder"]
        except NoDataError:
            flags.append("skip_fraction: no windows processed")
    return MetricReport(p, r, f1, actual, avg_iou, frr, fp / total_audio_s, mtwv, skip, skip_whole, tp, fp, fn, flags)


def term_weighted_value(detections, ground_truths, total_audio_s: float, beta: float = BETA_TWV):
    """Best per-term TWV over thresholds, averaged over terms.

    ``detections``: {utt_id: [Proposal]} scored candidates (any threshold);
    ``ground_truths``: {utt_id: [GroundTruthEvent]}.  Terms without any true
    occurrence are excluded and returned in the second element.
    """
    terms = sorted({g.class_id for gs in ground_truths.values() for g in gs})
    det_terms = sorted({p.class_id for ps in detections.values() for p in ps})
    excluded = [c for c in det_terms if c not in terms]
    values = {}
    for c in terms:
        n_true = sum(1 for gs in ground_truths.values() for g in gs if g.class_id == c)
        cands = sorted(
            ((p.score, uid, p) for uid, ps in detections.items() for p in ps if p.class_id == c),
            key=lambda x: (-x[0], x[1], x[2].b_hat),
        )
        used = {uid: [False] * len(gs) for uid, gs in ground_truths.items()}
        hits = fas = 0
        best = 0.0  # threshold above every score: no detections, TWV 0
        i = 0
        while i < len(cands):
            # admit every candidate tied at this score before evaluating
            score = cands[i][0]
            while i < len(cands) and cands[i][0] == score:
                _, uid, p = cands[i]
                gts = ground_truths.get(uid, [])
                j_best, v_best = -1, 0.0
                for j, g in enumerate(gts):
                    if g.class_id == c and not used[uid][j]:
                        v = _iou(p, g)
                        if v > v_best:
                            j_best, v_best = j, v
                if j_best >= 0:
                    used[uid][j_best] = True
                    hits += 1
                else:
                    fas += 1
                i += 1
            p_miss = 1.0 - hits / n_true
            p_fa = fas / (total_audio_s - n_true)
            best = max(best, 1.0 - p_miss - beta * p_fa)
        values[c] = best
    mean = sum(values.values()) / len(values) if values else 0.0
    return mean, excluded, values


def mtwv(detections, ground_truths, total_audio_s: float, beta: float = BETA_TWV) -> float:
    return term_weighted_value(detections, ground_truths, total_audio_s, beta)[0]

