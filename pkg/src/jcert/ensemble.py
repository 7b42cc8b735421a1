"""Ensemble composition and joint robustness certification.

Three composition modes over a fixed model list:

* unanimity -- output a class only when every model predicts it, else reject
* majority  -- output a class when at least floor(n/2)+1 models predict it
* averaging -- argmax of the mean logit vector (never rejects)

Joint certification rules, each sound for its framework:

* independent counting: an input is unanimity-robust when at least one model
  is individually certified, majority-robust when at least floor(n/2)+1 are.
* merged averaging: certify the single network whose forward pass equals the
  mean of the component logits; this certifies the averaging framework and,
  by the averaging-implies-unanimity argument, the unanimity framework too.

An input on which the clean ensemble rejects or errs is never counted
certified, whatever the margins say; reports keep those populations apart.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import MarginCertificate, PerturbationSpec, certify_single
from .netcore import Network, forward, merge_average, predict

UNANIMITY = "unanimity"
MAJORITY = "majority"
AVERAGING = "averaging"
MODES = (UNANIMITY, MAJORITY, AVERAGING)

STATUS_CERTIFIED = "certified_robust"
STATUS_UNKNOWN = "unknown"
STATUS_MISCLASSIFIED = "misclassified"
STATUS_REJECTED = "rejected"

RULE_INDEPENDENT = "independent_count"
RULE_MERGED = "merged_averaging"
RULE_COMBINED = "independent_or_merged"


@dataclass(frozen=True)
class Decision:
    """Either a class label or a rejection."""

    label: int | None

    @property
    def is_reject(self) -> bool:
        return self.label is None

    @staticmethod
    def of(label: int) -> "Decision":
        return Decision(int(label))

    @staticmethod
    def reject() -> "Decision":
        return Decision(None)


@dataclass(eq=False)
class EnsembleSpec:
    """An ordered model list plus the composition mode.

    Immutable in use; the merged averaging network is built once on first
    demand and shared, with construction guarded for concurrent first access.
    """

    models: tuple[Network, ...]
    mode: str

    _merged: Network | None = field(default=None, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        self.models = tuple(self.models)
        if not self.models:
            raise ValueError("ensemble needs at least one model")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        base = self.models[0]
        for m in self.models[1:]:
            if m.input_shape != base.input_shape or m.num_classes != base.num_classes:
                raise ValueError("ensemble models must share input shape and class count")

    @property
    def num_classes(self) -> int:
        return self.models[0].num_classes

    def merged_network(self) -> Network:
        if self._merged is None:
            with self._lock:
                if self._merged is None:
                    self._merged = merge_average(list(self.models))
        return self._merged


@dataclass(frozen=True)
class JointCertificate:
    """Joint robustness verdict for one input under one framework."""

    framework: str
    status: str
    rule: str
    true_class: int
    decision: Decision
    evidence: tuple[MarginCertificate, ...] = ()
    input_index: int | None = None

    @property
    def certified(self) -> bool:
        return self.status == STATUS_CERTIFIED

    @property
    def min_margin(self) -> float | None:
        """Margin of the strongest certificate backing this verdict."""
        vals = [c.min_margin for c in self.evidence if not c.misclassified]
        return max(vals) if vals else None


def _predictions(ens: EnsembleSpec, x) -> list[int]:
    return [predict(m, x) for m in ens.models]


def decide(ens: EnsembleSpec, x) -> Decision:
    """Clean ensemble output under the configured composition mode."""
    if ens.mode == AVERAGING:
        mean = np.mean([forward(m, x) for m in ens.models], axis=0)
        return Decision.of(int(np.argmax(mean)))
    preds = _predictions(ens, x)
    if ens.mode == UNANIMITY:
        return Decision.of(preds[0]) if len(set(preds)) == 1 else Decision.reject()
    counts = np.bincount(preds, minlength=ens.num_classes)
    winner = int(np.argmax(counts))
    if counts[winner] >= len(preds) // 2 + 1:
        return Decision.of(winner)
    return Decision.reject()


def _clean_status(decision: Decision, t: int) -> str | None:
    if decision.is_reject:
        return STATUS_REJECTED
    if decision.label != t:
        return STATUS_MISCLASSIFIED
    return None


def certify_unanimity_independent(ens: EnsembleSpec, x, t: int, spec: PerturbationSpec,
                                  method: str = "dual") -> JointCertificate:
    """Certified when at least one model is individually certified.

    Sound for the unanimity framework but deliberately conservative: a
    unanimity ensemble may be robust even when no single member is.
    """
    decision = decide(replace_mode(ens, UNANIMITY), x)
    certs = tuple(certify_single(m, x, t, spec, method) for m in ens.models)
    bad = _clean_status(decision, t)
    if bad is not None:
        status = bad
    else:
        status = STATUS_CERTIFIED if any(c.certified for c in certs) else STATUS_UNKNOWN
    return JointCertificate(UNANIMITY, status, RULE_INDEPENDENT, t, decision, certs)


def certify_majority_independent(ens: EnsembleSpec, x, t: int, spec: PerturbationSpec,
                                 method: str = "dual") -> JointCertificate:
    """Certified when at least floor(n/2)+1 models are individually certified."""
    decision = decide(replace_mode(ens, MAJORITY), x)
    certs = tuple(certify_single(m, x, t, spec, method) for m in ens.models)
    bad = _clean_status(decision, t)
    need = len(ens.models) // 2 + 1
    if bad is not None:
        status = bad
    else:
        status = STATUS_CERTIFIED if sum(c.certified for c in certs) >= need else STATUS_UNKNOWN
    return JointCertificate(MAJORITY, status, RULE_INDEPENDENT, t, decision, certs)


def certify_averaging(ens: EnsembleSpec, x, t: int, spec: PerturbationSpec,
                      method: str = "dual") -> JointCertificate:
    """Single-model certification of the cached merged averaging network."""
    merged = ens.merged_network()
    cert = certify_single(merged, np.asarray(x, float).reshape(-1), t, spec, method)
    decision = Decision.of(predict(merged, np.asarray(x, float).reshape(-1)))
    bad = _clean_status(decision, t)
    if bad is not None:
        status = bad
    else:
        status = STATUS_CERTIFIED if cert.certified else STATUS_UNKNOWN
    return JointCertificate(AVERAGING, status, RULE_MERGED, t, decision, (cert,))


def certify_unanimity_via_averaging(ens: EnsembleSpec, x, t: int, spec: PerturbationSpec,
                                    method: str = "dual") -> JointCertificate:
    """Unanimity certification through the merged averaging network.

    A certified mean margin rules out any point where all models agree on a
    wrong class, so the averaging certificate transfers to the unanimity
    framework.  The clean decision is still the unanimity one: an input the
    ensemble rejects is reported as rejected, not certified.
    """
    avg = certify_averaging(ens, x, t, spec, method)
    decision = decide(replace_mode(ens, UNANIMITY), x)
    bad = _clean_status(decision, t)
    if bad is not None:
        status = bad
    elif avg.status == STATUS_CERTIFIED:
        status = STATUS_CERTIFIED
    else:
        status = STATUS_UNKNOWN
    return JointCertificate(UNANIMITY, status, RULE_MERGED, t, decision, avg.evidence)


def certify_joint(ens: EnsembleSpec, x, t: int, spec: PerturbationSpec,
                  method: str = "dual") -> JointCertificate:
    """Framework-appropriate certification for one input.

    Unanimity takes the union of the independent and merged rules (both are
    sound, so the disjunction is the tighter lower bound).
    """
    if ens.mode == AVERAGING:
        return certify_averaging(ens, x, t, spec, method)
    if ens.mode == MAJORITY:
        return certify_majority_independent(ens, x, t, spec, method)
    indep = certify_unanimity_independent(ens, x, t, spec, method)
    if indep.status in (STATUS_MISCLASSIFIED, STATUS_REJECTED):
        return indep
    via = certify_unanimity_via_averaging(ens, x, t, spec, method)
    certified = indep.status == STATUS_CERTIFIED or via.status == STATUS_CERTIFIED
    status = STATUS_CERTIFIED if certified else STATUS_UNKNOWN
    return JointCertificate(UNANIMITY, status, RULE_COMBINED, t, indep.decision,
                            indep.evidence + via.evidence)


def replace_mode(ens: EnsembleSpec, mode: str) -> EnsembleSpec:
    if ens.mode == mode:
        return ens
    clone = EnsembleSpec(ens.models, mode)
    clone._merged = ens._merged
    clone._lock = ens._lock
    return clone


@dataclass(frozen=True)
class EvalRecord:
    index: int
    label: int
    decision: Decision
    framework: str
    status: str
    min_margin: float | None


@dataclass(frozen=True)
class EvalReport:
    """Certified/error/rejection accounting over a labeled dataset.

    The four-way breakdown partitions the inputs: certified, correct but
    uncertified, rejected, and wrongly classified; the counts always sum to
    the dataset size.
    """

    framework: str
    method: str
    epsilon: float
    count: int
    certified_count: int
    correct_uncertified_count: int
    rejected_count: int
    wrong_count: int
    records: tuple[EvalRecord, ...]

    @property
    def certified_rate(self) -> float:
        return self.certified_count / self.count

    @property
    def clean_error_rate(self) -> float:
        return self.wrong_count / self.count

    @property
    def rejection_rate(self) -> float:
        return self.rejected_count / self.count

    def to_dict(self) -> dict:
        return {
            "framework": self.framework,
            "method": self.method,
            "epsilon": self.epsilon,
            "count": self.count,
            "certified_count": self.certified_count,
            "certified_rate": self.certified_rate,
            "clean_error_rate": self.clean_error_rate,
            "rejection_rate": self.rejection_rate,
            "breakdown": {
                "certified": self.certified_count,
                "correct_uncertified": self.correct_uncertified_count,
                "rejected": self.rejected_count,
                "wrong": self.wrong_count,
            },
            "per_input": [
                {
                    "index": r.index,
                    "label": r.label,
                    "decision": r.decision.label,
                    "status": r.status,
                    "min_margin": r.min_margin,
                }
                for r in self.records
            ],
        }


def evaluate(ens: EnsembleSpec, dataset, spec: PerturbationSpec,
             method: str = "dual", jobs: int = 1) -> EvalReport:
    """Certify every input of a labeled dataset under the ensemble's framework."""
    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(inputs) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if ens.mode != AVERAGING:
        ens.merged_network()  # build once before sharding across threads

    def one(i: int) -> EvalRecord:
        cert = certify_joint(ens, inputs[i], int(labels[i]), spec, method)
        return EvalRecord(i, int(labels[i]), cert.decision, cert.framework,
                          cert.status, cert.min_margin)

    indices = range(len(inputs))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(one, indices))
    else:
        records = [one(i) for i in indices]
    certified = sum(r.status == STATUS_CERTIFIED for r in records)
    rejected = sum(r.status == STATUS_REJECTED for r in records)
    wrong = sum(r.status == STATUS_MISCLASSIFIED for r in records)
    correct_uncert = len(records) - certified - rejected - wrong
    return EvalReport(ens.mode, method, spec.epsilon, len(records), certified,
                      correct_uncert, rejected, wrong, tuple(records))
