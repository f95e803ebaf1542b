"""Closed-set language detection scoring: pooled EER and NIST LRE07-style Cavg.

Every utterance yields one detection trial per language: a target trial for
its true language and non-target trials for the other K-1.  Scores are
log-posteriors; a trial is accepted when its score is >= the threshold.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

C_MISS = 1.0
C_FA = 1.0
P_TARGET = 0.5
DEFAULT_THRESHOLD = float(np.log(0.5))


@dataclass
class TrialScoreSet:
    languages: list
    ids: list = field(default_factory=list)
    labels: np.ndarray = None  # (N,) index into languages
    scores: np.ndarray = None  # (N, K)
    buckets: list = field(default_factory=list)

    def __post_init__(self):
        k = len(self.languages)
        self.labels = np.zeros(0, dtype=np.int64) if self.labels is None else np.asarray(self.labels, dtype=np.int64)
        self.scores = np.zeros((0, k)) if self.scores is None else np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[1] != k:
            raise ValueError(f"scores must be (N, {k}), got {self.scores.shape}")
        if len(self.labels) != len(self.scores):
            raise ValueError("labels and scores differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.labels))]
        if not self.buckets:
            self.buckets = ["all"] * len(self.labels)
        if np.any((self.labels < 0) | (self.labels >= k)):
            raise ValueError("true label outside the language list")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "TrialScoreSet":
        mask = np.asarray(mask, dtype=bool)
        return TrialScoreSet(self.languages, [i for i, m in zip(self.ids, mask) if m], self.labels[mask],
                             self.scores[mask], [b for b, m in zip(self.buckets, mask) if m])

    def bucket_names(self):
        return sorted(set(self.buckets), key=_bucket_key)

    def target_nontarget(self):
        onehot = np.zeros(self.scores.shape, dtype=bool)
        onehot[np.arange(len(self.labels)), self.labels] = True
        return self.scores[onehot], self.scores[~onehot]


def _bucket_key(b):
    try:
        return (0, float(b.rstrip("s")), b)
    except ValueError:
        return (1, 0.0, b)


def eer_from_trials(tar: np.ndarray, non: np.ndarray) -> float:
    """Equal error rate in percent from target / non-target score arrays.

    Operating points are taken at every distinct score (accept >= t), plus
    accept-all and reject-all.  Where P_miss and P_fa cross between two
    adjacent points the crossing is linearly interpolated.
    """
    tar = np.asarray(tar, dtype=np.float64)
    non = np.asarray(non, dtype=np.float64)
    if tar.size == 0 or non.size == 0:
        raise ValueError("EER needs at least one target and one non-target trial")
    thr = np.unique(np.concatenate([tar, non]))
    tar_s, non_s = np.sort(tar), np.sort(non)
    p_miss = np.concatenate([[0.0], np.searchsorted(tar_s, thr, side="left") / tar.size, [1.0]])
    p_fa = np.concatenate([[1.0], 1 - np.searchsorted(non_s, thr, side="left") / non.size, [0.0]])
    diff = p_miss - p_fa  # nondecreasing from -1 to 1
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0:
        return 100.0 * p_miss[k]
    a, b = k - 1, k
    t = -diff[a] / (diff[b] - diff[a])
    return 100.0 * (p_miss[a] + t * (p_miss[b] - p_miss[a]))


def eer(scores: TrialScoreSet) -> float:
    return eer_from_trials(*scores.target_nontarget())


def _check_languages(scores: TrialScoreSet):
    k = len(scores.languages)
    if k < 2:
        raise ValueError("Cavg needs at least two languages")
    present = np.bincount(scores.labels, minlength=k) > 0
    if not present.all():
        missing = [scores.languages[i] for i in np.flatnonzero(~present)]
        raise ValueError(f"no test utterances for language(s): {', '.join(missing)}")


def detection_rates(scores: TrialScoreSet, thresholds):
    """P_miss[t] and P_fa[t, n] for per-language thresholds."""
    k = len(scores.languages)
    accept = scores.scores >= np.asarray(thresholds, dtype=np.float64)[None, :]
    p_miss = np.empty(k)
    p_fa = np.zeros((k, k))
    for n in range(k):
        rows = scores.labels == n
        rate = accept[rows].mean(axis=0)  # fraction of language-n utterances accepted by each detector
        p_fa[:, n] = rate
        p_miss[n] = 1 - rate[n]
    np.fill_diagonal(p_fa, 0.0)
    return p_miss, p_fa


def c_avg(scores: TrialScoreSet, thresholds=None) -> float:
    """Average detection cost in percent at fixed per-language thresholds (default log 0.5)."""
    _check_languages(scores)
    k = len(scores.languages)
    if thresholds is None:
        thresholds = np.full(k, DEFAULT_THRESHOLD)
    p_miss, p_fa = detection_rates(scores, thresholds)
    per_lang = C_MISS * P_TARGET * p_miss + C_FA * (1 - P_TARGET) * p_fa.sum(axis=1) / (k - 1)
    return 100.0 * per_lang.mean()


def min_c_avg(scores: TrialScoreSet) -> float:
    """Cavg with each language's threshold chosen to minimize its own cost term."""
    _check_languages(scores)
    k = len(scores.languages)
    best = np.empty(k)
    for t in range(k):
        col = scores.scores[:, t]
        cands = np.concatenate([np.unique(col), [np.inf]])
        is_tar = scores.labels == t
        n_tar = is_tar.sum()
        counts = np.bincount(scores.labels, minlength=k)
        costs = []
        for thr in cands:
            acc = col >= thr
            miss = 1 - acc[is_tar].sum() / n_tar
            fa = sum(acc[scores.labels == n].sum() / counts[n] for n in range(k) if n != t)
            costs.append(C_MISS * P_TARGET * miss + C_FA * (1 - P_TARGET) * fa / (k - 1))
        best[t] = min(costs)
    return 100.0 * best.mean()


def accuracy(scores: TrialScoreSet) -> float:
    return float((scores.scores.argmax(axis=1) == scores.labels).mean())


@dataclass
class BucketResult:
    bucket: str
    n: int
    cavg: float
    eer: float
    accuracy: float


def bucket_report(scores: TrialScoreSet) -> list[BucketResult]:
    if not len(scores):
        raise ValueError("no scored utterances")
    rows = []
    for b in scores.bucket_names():
        sub = scores.subset([x == b for x in scores.buckets])
        rows.append(BucketResult(b, len(sub), c_avg(sub), eer(sub), accuracy(sub)))
    return rows


def format_report(rows, title="system") -> str:
    """Table with one column per duration bucket, cells ``Cavg/EER`` in percent."""
    head = f"{'System':<16}" + "".join(f" {r.bucket:>17}" for r in rows)
    cells = f"{title:<16}" + "".join(f" {f'{r.cavg:.2f}/{r.eer:.2f}':>17}" for r in rows)
    note = f"{'':<16}" + "".join(f" {'n=' + str(r.n) + f' acc={100 * r.accuracy:.1f}':>17}" for r in rows)
    return "\n".join([f"{'':<16}Cavg(%)/EER(%)", head, cells, note])


def format_score_file(scores: TrialScoreSet) -> str:
    lines = []
    for i in range(len(scores)):
        vals = " ".join(f"{v:.10g}" for v in scores.scores[i])
        lines.append(f"{scores.ids[i]} {scores.languages[scores.labels[i]]} {scores.buckets[i]} {vals}")
    return "\n".join(lines) + "\n"


def read_score_file(path, languages) -> TrialScoreSet:
    ids, labels, buckets, rows = [], [], [], []
    index = {l: i for i, l in enumerate(languages)}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            labels.append(index[parts[1]])
            buckets.append(parts[2])
            rows.append([float(v) for v in parts[3:]])
    return TrialScoreSet(list(languages), ids, np.array(labels, dtype=np.int64),
                         np.array(rows).reshape(len(rows), len(languages)), buckets)


def score_features(model, items, languages=None, max_failure_rate=0.05) -> TrialScoreSet:
    """Whole-utterance scoring of ``(id, features, label, bucket)`` items.

    Per-utterance failures are logged and skipped; more than
    ``max_failure_rate`` of them fails the run.
    """
    from .model import ClassMismatchError, log_posteriors

    items = list(items)
    if not items:
        raise ValueError("nothing to score: empty manifest")
    languages = list(languages or model.languages)
    index = {l: i for i, l in enumerate(model.languages)}
    unknown = sorted({it[2] for it in items} - set(index))
    if len(languages) != len(model.languages) or unknown:
        raise ClassMismatchError(
            f"model scores {len(model.languages)} languages {model.languages}, test set has "
            f"{len(languages)}" + (f" including unknown {unknown}" if unknown else ""))
    ids, labels, rows, buckets, failures = [], [], [], [], 0
    for utt_id, feats, label, bucket in items:
        try:
            lp = log_posteriors(model, feats)
        except Exception as exc:  # per-utterance failures are counted, not fatal
            log.warning("skipping %s: %s", utt_id, exc)
            failures += 1
            continue
        ids.append(utt_id)
        labels.append(index[label])
        rows.append(lp)
        buckets.append(bucket or "all")
    if failures:
        log.warning("%d of %d utterances failed", failures, len(items))
    if failures > max_failure_rate * len(items):
        raise RuntimeError(f"{failures} of {len(items)} utterances failed (> {100 * max_failure_rate:.0f}%)")
    return TrialScoreSet(list(model.languages), ids, np.array(labels), np.array(rows), buckets)


def score_run(checkpoint, manifest, workers=1, **frontend_options) -> tuple[TrialScoreSet, list[BucketResult]]:
    """Load a checkpoint, score every manifest utterance whole, and report per bucket."""
    from .fileio import read_manifest
    from .frontend import load_features
    from .model import load_checkpoint

    model, _ = load_checkpoint(checkpoint)
    entries = read_manifest(manifest)
    if not entries:
        raise ValueError(f"{manifest}: empty manifest")
    langs = sorted({e.label for e in entries if e.label})
    if len(langs) > len(model.languages) or not set(langs) <= set(model.languages):
        from .model import ClassMismatchError

        raise ClassMismatchError(
            f"checkpoint has {len(model.languages)} classes {model.languages}; manifest labels {langs}")

    def load(e):
        try:
            return (e.id, load_features(e.path, **frontend_options), e.label, e.bucket)
        except Exception as exc:
            log.warning("cannot load %s: %s", e.id, exc)
            return (e.id, np.zeros((64, 0)), e.label, e.bucket)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            items = list(pool.map(load, entries))
    else:
        items = [load(e) for e in entries]
    scores = score_features(model, items)
    return scores, bucket_report(scores)
