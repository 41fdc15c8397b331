"""Adaptive per-class drop intensity.

Each class alternates between a lower and a higher candidate intensity every
``period`` iterations. At every switch the class's cross-entropy over its
replay-memory samples is measured and the loss reduction is credited to the
candidate that was just active. Once both histories hold ``history_length``
values a one-sided Welch t-test decides whether to shift toward the winner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

DEC, INC = "dec", "inc"
DECREMENTED, INCREMENTED, UNCHANGED, SKIPPED = "decremented", "incremented", "unchanged", "skipped"


@dataclass(frozen=True)
class ShiftConfig:
    alpha: float = 0.9
    period: int = 3
    history_length: int = 10
    gamma: float = 5.0
    kappa0: float = 5.0
    significance: float = 0.05

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")
        if self.history_length < 2:
            raise ValueError(f"history_length must be >= 2, got {self.history_length}")
        if not 0 <= self.gamma <= 100:
            raise ValueError(f"gamma must lie in [0, 100], got {self.gamma}")
        if not 0 < self.kappa0 <= self.gamma and not (self.kappa0 == 0 == self.gamma):
            raise ValueError(f"kappa0 must lie in (0, gamma], got {self.kappa0} with gamma {self.gamma}")
        if not 0 < self.significance < 0.5:
            raise ValueError(f"significance must lie in (0, 0.5), got {self.significance}")


# ---------------------------------------------------------------- statistics

def _betacf(a, b, x, eps=1e-15, max_iter=500):
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta failed to converge for a={a}, b={b}, x={x}")


def betainc(a, b, x):
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a > 0 and b > 0")
    if x <= 0:
        return 0.0
    if x >= 1:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1) / (a + b + 2):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_upper_tail(t, df):
    """P(T >= t) for Student's t with ``df`` degrees of freedom."""
    half = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return half if t >= 0 else 1.0 - half


def _mean_var(xs):
    n = len(xs)
    m = math.fsum(xs) / n
    v = math.fsum((x - m) ** 2 for x in xs) / (n - 1)
    return m, v


def t_test_p(h_dec, h_inc):
    """One-sided Welch p-value for the alternative mean(h_dec) > mean(h_inc).

    With both sample variances zero the result is 0.5 for equal means, else 0 or 1.
    """
    if len(h_dec) < 2 or len(h_inc) < 2:
        raise ValueError("t_test_p needs at least two values in each sample")
    m1, v1 = _mean_var(h_dec)
    m2, v2 = _mean_var(h_inc)
    s1, s2 = v1 / len(h_dec), v2 / len(h_inc)
    se2 = s1 + s2
    if se2 == 0:
        if m1 == m2:
            return 0.5
        return 0.0 if m1 > m2 else 1.0
    t = (m1 - m2) / math.sqrt(se2)
    # Welch-Satterthwaite, written in variance shares so tiny variances cannot underflow
    w1, w2 = s1 / se2, s2 / se2
    df = 1.0 / (w1 * w1 / (len(h_dec) - 1) + w2 * w2 / (len(h_inc) - 1))
    return t_upper_tail(t, df)


# ---------------------------------------------------------------- per-class state

@dataclass
class IntensityState:
    class_id: int
    kappa_dec: float
    kappa_inc: float
    h_dec: list = field(default_factory=list)
    h_inc: list = field(default_factory=list)
    l_old: float | None = None
    phase: str = DEC
    iter_in_phase: int = 0

    @classmethod
    def fresh(cls, class_id, cfg: ShiftConfig):
        return cls(class_id, cfg.kappa0 * cfg.alpha, min(cfg.kappa0 / cfg.alpha, cfg.gamma))

    def reset_histories(self):
        self.h_dec.clear()
        self.h_inc.clear()


def current_kappa(state: IntensityState):
    return state.kappa_dec if state.phase == DEC else state.kappa_inc


def on_boundary(state: IntensityState, l_new, cfg: ShiftConfig):
    """Credit the loss change since the last switch to the phase just completed, then swap."""
    if state.l_old is not None:
        hist = state.h_dec if state.phase == DEC else state.h_inc
        if len(hist) < cfg.history_length:
            hist.append(state.l_old - l_new)
    state.l_old = l_new
    state.phase = INC if state.phase == DEC else DEC
    state.iter_in_phase = 0


def histories_full(state: IntensityState, cfg: ShiftConfig):
    return len(state.h_dec) >= cfg.history_length and len(state.h_inc) >= cfg.history_length


def maybe_shift(state: IntensityState, cfg: ShiftConfig):
    """Run the test on full histories and move the candidates; returns (outcome, p)."""
    if not histories_full(state, cfg):
        raise ValueError("maybe_shift needs both histories full")
    p = t_test_p(state.h_dec, state.h_inc)
    if p <= cfg.significance:
        state.kappa_inc = state.kappa_dec
        state.kappa_dec = state.kappa_dec * cfg.alpha
        outcome = DECREMENTED
    elif p >= 1 - cfg.significance:
        state.kappa_dec = state.kappa_inc
        state.kappa_inc = min(state.kappa_inc / cfg.alpha, cfg.gamma)
        outcome = INCREMENTED
    else:
        outcome = UNCHANGED
    state.reset_histories()
    return outcome, p


# ---------------------------------------------------------------- scheduler

@dataclass
class TraceRow:
    iteration: int
    class_id: int
    phase: str
    kappa: float
    p_value: float | None
    outcome: str


class IntensityShifter:
    """Per-class states driven by one global phase clock.

    The ``losses`` mapping passed to :meth:`boundary` maps class id to the mean
    cross-entropy over that class's replay samples; classes missing from it
    are skipped for the boundary. With ``common=True`` a single state (class id
    -1) is shared by all classes and fed the whole-buffer loss under key -1.
    """

    def __init__(self, cfg: ShiftConfig, class_ids, common=False):
        cfg.validate()
        self.cfg = cfg
        self.common = common
        ids = [-1] if common else list(class_ids)
        self.states = {c: IntensityState.fresh(c, cfg) for c in ids}
        self.phase = DEC
        self.clock = 0
        self.trace: list[TraceRow] = []
        self.iteration = 0

    def state_for(self, class_id):
        return self.states[-1 if self.common else class_id]

    def kappa(self, class_id):
        return current_kappa(self.state_for(class_id))

    def at_boundary(self):
        return self.clock > 0 and self.clock % self.cfg.period == 0

    def tick(self):
        """Advance one training iteration; True when a boundary measurement is due."""
        self.iteration += 1
        self.clock += 1
        for st in self.states.values():
            st.iter_in_phase += 1
        return self.at_boundary()

    def boundary(self, losses):
        outcomes = {}
        for cid, st in self.states.items():
            if cid in losses:
                on_boundary(st, float(losses[cid]), self.cfg)
                p = None
                outcome = UNCHANGED
                if histories_full(st, self.cfg):
                    outcome, p = maybe_shift(st, self.cfg)
                    outcomes[cid] = (outcome, p)
                self.trace.append(TraceRow(self.iteration, cid, st.phase, current_kappa(st), p,
                                           outcome if p is not None else "collected"))
            else:
                # the global clock still advances for classes absent from memory
                st.phase = INC if self.phase == DEC else DEC
                st.iter_in_phase = 0
                self.trace.append(TraceRow(self.iteration, cid, st.phase, current_kappa(st), None, SKIPPED))
        self.phase = INC if self.phase == DEC else DEC
        return outcomes

    def new_task(self):
        """Clear histories, reference losses and the phase clock; keep the intensities."""
        for st in self.states.values():
            st.reset_histories()
            st.l_old = None
            st.phase = DEC
            st.iter_in_phase = 0
        self.phase = DEC
        self.clock = 0

    def endpoints(self):
        return {cid: {"kappa_dec": st.kappa_dec, "kappa_inc": st.kappa_inc}
                for cid, st in self.states.items()}


class ReferenceShifter:
    """Two-model reference: one model always runs the lower candidate, one the higher.

    Both histories fill simultaneously from ``2 * period``-iteration windows
    whose ends (iterations p, 3p, 5p, ...) line up with the single-model
    shifter's boundaries, so the t-tests of both versions fall on the same
    iterations and can be compared one to one.
    """

    def __init__(self, cfg: ShiftConfig, class_ids):
        cfg.validate()
        self.cfg = cfg
        self.states = {c: IntensityState.fresh(c, cfg) for c in class_ids}
        self.l_old = {}
        self.clock = 0
        self.iteration = 0
        self.trace: list[TraceRow] = []

    def kappa_dec(self, class_id):
        return self.states[class_id].kappa_dec

    def kappa_inc(self, class_id):
        return self.states[class_id].kappa_inc

    def tick(self):
        self.iteration += 1
        self.clock += 1
        p = self.cfg.period
        return self.clock >= p and (self.clock - p) % (2 * p) == 0

    def boundary(self, losses_dec, losses_inc):
        outcomes = {}
        for cid, st in self.states.items():
            if cid not in losses_dec or cid not in losses_inc:
                self.trace.append(TraceRow(self.iteration, cid, "pair", st.kappa_dec, None, SKIPPED))
                continue
            new = (float(losses_dec[cid]), float(losses_inc[cid]))
            old = self.l_old.get(cid)
            p = None
            outcome = "collected"
            if old is not None:
                if len(st.h_dec) < self.cfg.history_length:
                    st.h_dec.append(old[0] - new[0])
                    st.h_inc.append(old[1] - new[1])
                if histories_full(st, self.cfg):
                    outcome, p = maybe_shift(st, self.cfg)
                    outcomes[cid] = (outcome, p)
            self.l_old[cid] = new
            self.trace.append(TraceRow(self.iteration, cid, "pair", st.kappa_dec, p, outcome))
        return outcomes

    def new_task(self):
        for st in self.states.values():
            st.reset_histories()
        self.l_old.clear()
        self.clock = 0

    def endpoints(self):
        return {cid: {"kappa_dec": st.kappa_dec, "kappa_inc": st.kappa_inc}
                for cid, st in self.states.items()}


def tested_outcomes(trace):
    """Map (iteration, class_id) -> outcome for every row where a test ran."""
    return {(r.iteration, r.class_id): r.outcome for r in trace if r.p_value is not None}


def agreement(single_trace, reference_trace):
    """Per-class fraction of shared test points where both versions chose the same shift."""
    a, b = tested_outcomes(single_trace), tested_outcomes(reference_trace)
    per_class = {}
    for key in sorted(set(a) & set(b)):
        hits = per_class.setdefault(key[1], [0, 0])
        hits[0] += a[key] == b[key]
        hits[1] += 1
    return {c: h[0] / h[1] for c, h in per_class.items()}, sum(h[1] for h in per_class.values())


def run_reference_pair(config, seeds=None):
    """Compare single-model shifting with the two-model reference; see ``harness``."""
    from .harness import run_reference_pair as _run

    return _run(config, seeds)
