"""Offload/prefetch planning for the per-iteration variables of the solver.

A :class:`PhaseTrace` profiles one outer iteration: the phases with their
durations and, per variable, its size and the window in which each phase
touches it.  The trace is assumed to repeat every iteration.

Between two consecutive accesses of a variable there is a *gap*.  A plan
may offload the variable at the end of the first access and prefetch it
before the next one.  Per gap, three choices are considered:

``none``
    keep the variable resident;
``early``
    prefetch as soon as the offload finishes;
``late``
    prefetch as late as possible so the copy completes exactly when the
    consuming phase starts (never before the offload has finished).

Rules a plan must satisfy:

* C1: the prefetch starts after the offload has finished;
* C2: the prefetch distance (consumption time minus prefetch start) is
  positive, so a gap of length zero is never offloaded;
* C3: the offload copy (size / bandwidth) is shorter than the gap;
* C4: a prefetch that finishes after its consuming phase has started is
  allowed, but the overrun is charged as exposed delay.

Plans are scored by ``M`` (fraction of peak memory saved), ``T`` (exposed
delay as a fraction of the iteration time) and ``MT = M / T``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

NONE, EARLY, LATE = "none", "early", "late"
CHOICES = (NONE, EARLY, LATE)
DEFAULT_BANDWIDTH = 3.2e6  # bytes per ms (3.2 GB/s)


class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True)
class Phase:
    name: str
    duration: float


@dataclass(frozen=True)
class Variable:
    name: str
    size: float
    eligible: bool = True


@dataclass(frozen=True)
class Access:
    var: str
    phase: str
    first: float
    last: float


@dataclass(frozen=True)
class Gap:
    """Interval between the end of one access and the start of the next."""

    var: str
    index: int  # gap ordinal within the variable, in access order
    phase: str  # phase whose access opens the gap
    next_phase: str
    t_last: float  # absolute end of the opening access
    t_next: float  # absolute start of the closing access (may exceed one iteration)
    next_phase_start: float  # absolute start of the consuming phase

    @property
    def mpd(self) -> float:
        return self.t_next - self.t_last


@dataclass(frozen=True)
class Scratch:
    """Working buffer that exists only inside one phase window; never offloaded."""

    name: str
    size: float
    phase: str
    first: float
    last: float


@dataclass
class PhaseTrace:
    phases: list
    variables: dict
    accesses: list
    bandwidth: float = DEFAULT_BANDWIDTH
    scratch: list = field(default_factory=list)

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a trace needs at least one phase")
        names = [p.name for p in self.phases]
        if len(set(names)) != len(names):
            raise ValueError("phase names must be unique")
        if any(p.duration <= 0 for p in self.phases):
            raise ValueError("phase durations must be positive")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        dur = dict(zip(names, (p.duration for p in self.phases)))
        for v in self.variables.values():
            if v.size <= 0:
                raise ValueError(f"variable {v.name} must have a positive size")
        for a in self.accesses:
            if a.var not in self.variables:
                raise ValueError(f"access to unknown variable {a.var}")
            if a.phase not in dur:
                raise ValueError(f"access in unknown phase {a.phase}")
            if not 0 <= a.first <= a.last <= dur[a.phase]:
                raise ValueError(f"access window of {a.var} in {a.phase} is outside the phase")
        for b in self.scratch:
            if b.phase not in dur or not 0 <= b.first <= b.last <= dur[b.phase] or b.size <= 0:
                raise ValueError(f"scratch buffer {b.name} is malformed")

    @property
    def iteration_time(self) -> float:
        return sum(p.duration for p in self.phases)

    def phase_start(self, name: str) -> float:
        t = 0.0
        for p in self.phases:
            if p.name == name:
                return t
            t += p.duration
        raise KeyError(name)

    def phase_index(self, name: str) -> int:
        return [p.name for p in self.phases].index(name)

    def accesses_of(self, var: str) -> list:
        acc = [a for a in self.accesses if a.var == var]
        return sorted(acc, key=lambda a: (self.phase_index(a.phase), a.first))

    def transfer_time(self, var: str) -> float:
        return self.variables[var].size / self.bandwidth

    def gaps(self, var: str) -> list[Gap]:
        """Gaps of ``var`` in access order; the last one wraps to the next iteration."""
        acc = self.accesses_of(var)
        out = []
        T = self.iteration_time
        for j, a in enumerate(acc):
            b = acc[(j + 1) % len(acc)]
            t_last = self.phase_start(a.phase) + a.last
            wrap = T if j + 1 == len(acc) else 0.0
            t_next = wrap + self.phase_start(b.phase) + b.first
            out.append(Gap(var, j, a.phase, b.phase, t_last, t_next,
                           wrap + self.phase_start(b.phase)))
        return out

    def persistent_total(self) -> float:
        return sum(v.size for v in self.variables.values())

    def scratch_intervals(self) -> list:
        return [(self.phase_start(b.phase) + b.first, self.phase_start(b.phase) + b.last, b.size)
                for b in self.scratch]

    def baseline_peak(self) -> float:
        """Peak with every variable resident: all variables plus the largest
        concurrent set of scratch buffers."""
        return _peak_level(self.persistent_total(), [], self.scratch_intervals(),
                           self.iteration_time)


# --- trace file ------------------------------------------------------------------

def parse_trace(text: str, bandwidth: float = DEFAULT_BANDWIDTH) -> PhaseTrace:
    """Parse the line format ``phase <name> <dur_ms>``, ``var <name> <bytes>
    <eligible 0|1>``, ``access <var> <phase> <first_ms> <last_ms>``.

    An optional ``scratch <name> <bytes> <phase> <first_ms> <last_ms>``
    record declares a working buffer live only in that window.  Blank lines
    and ``#`` comments are ignored.
    """
    phases, variables, accesses, scratch = [], {}, [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "phase" and len(parts) == 3:
                phases.append(Phase(parts[1], float(parts[2])))
            elif parts[0] == "var" and len(parts) == 4:
                if parts[3] not in ("0", "1"):
                    raise ValueError("eligible must be 0 or 1")
                variables[parts[1]] = Variable(parts[1], float(parts[2]), parts[3] == "1")
            elif parts[0] == "access" and len(parts) == 5:
                accesses.append(Access(parts[1], parts[2], float(parts[3]), float(parts[4])))
            elif parts[0] == "scratch" and len(parts) == 6:
                scratch.append(Scratch(parts[1], float(parts[2]), parts[3], float(parts[4]),
                                       float(parts[5])))
            else:
                raise ValueError(f"unrecognised record {parts[0]!r}")
        except ValueError as exc:
            raise ValueError(f"trace line {lineno}: {exc}") from exc
    return PhaseTrace(phases, variables, accesses, bandwidth, scratch)


def load_trace(path, bandwidth: float = DEFAULT_BANDWIDTH) -> PhaseTrace:
    return parse_trace(Path(path).read_text(), bandwidth)


def format_trace(trace: PhaseTrace) -> str:
    lines = [f"phase {p.name} {p.duration:g}" for p in trace.phases]
    lines += [f"var {v.name} {v.size:g} {int(v.eligible)}" for v in trace.variables.values()]
    lines += [f"access {a.var} {a.phase} {a.first:g} {a.last:g}" for a in trace.accesses]
    lines += [f"scratch {b.name} {b.size:g} {b.phase} {b.first:g} {b.last:g}"
              for b in trace.scratch]
    return "\n".join(lines) + "\n"


# One outer iteration at production scale, in the shape reported for the
# solver: LSP dominates the time; psi, lambda and g are the offload candidates.
EXAMPLE_TRACE = """\
# phases of one outer iteration (ms)
phase LSP 2010
phase RSP 420
phase lambda 330
phase penalty 240
# variables: bytes, eligible for offload
var u 1.0e9 0
var d 1.0e9 0
var psi 1.2e9 1
var lambda 1.2e9 1
var g 1.2e9 1
var g_prev 1.2e9 0
var G 1.0e9 0
var G_prev 1.0e9 0
# access windows within each phase (ms)
access u LSP 0 2010
access u RSP 0 300
access u lambda 0 200
access d LSP 0 2010
access psi LSP 0 15
access psi lambda 0 150
access lambda LSP 0 15
access lambda RSP 0 120
access lambda lambda 100 330
access lambda penalty 0 240
access g LSP 0 2010
access g_prev LSP 0 2010
access G LSP 0 2010
access G_prev LSP 0 2010
# chunk buffers of the transform pipeline
scratch chunks 2.4e9 LSP 400 2010
"""


def example_trace(bandwidth: float = DEFAULT_BANDWIDTH) -> PhaseTrace:
    return parse_trace(EXAMPLE_TRACE, bandwidth)


# --- plans ------------------------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    """Offload/prefetch pair for one gap; times are absolute ms in the iteration."""

    var: str
    gap: int
    offload_start: float
    prefetch_start: float
    choice: str = ""


@dataclass
class OffloadPlan:
    transfers: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.transfers)

    def describe(self) -> list[str]:
        return [f"{t.var}[gap {t.gap}] offload@{t.offload_start:.3f}ms "
                f"prefetch@{t.prefetch_start:.3f}ms ({t.choice})" for t in self.transfers]


@dataclass(frozen=True)
class PlanScore:
    M: float
    T: float
    MT: float
    peak: float = 0.0
    base_peak: float = 0.0
    delay: float = 0.0

    def rank_key(self):
        return (self.MT, self.M)


def score(M: float, T: float, **extra) -> PlanScore:
    """``MT = M / T``; ``+inf`` when ``T = 0`` and ``M > 0``; ``0`` when ``M = 0``."""
    if M < 0 or T < 0:
        raise ValueError("M and T must be non-negative")
    if M == 0:
        mt = 0.0
    elif T == 0:
        mt = math.inf
    else:
        mt = M / T
    return PlanScore(M, T, mt, **extra)


def derive_pd_mpd(trace: PhaseTrace, var: str, phase: str,
                  prefetch_start: float | None = None) -> tuple[float, float]:
    """Prefetch distance and maximum prefetch distance for the gap that
    starts after ``var``'s access in ``phase``.

    Without ``prefetch_start`` the prefetch is taken at the last access, so
    ``PD == MPD``.
    """
    if not trace.accesses_of(var):
        raise ValueError(f"{var} is never accessed")
    for gap in trace.gaps(var):
        if gap.phase == phase:
            start = gap.t_last if prefetch_start is None else prefetch_start
            return gap.t_next - start, gap.mpd
    raise ValueError(f"{var} is not accessed in phase {phase}")


def make_transfer(trace: PhaseTrace, gap: Gap, choice: str) -> Transfer | None:
    if choice == NONE:
        return None
    dt = trace.transfer_time(gap.var)
    off_end = gap.t_last + dt
    if choice == EARLY:
        pre = off_end
    elif choice == LATE:
        pre = max(off_end, gap.next_phase_start - dt)
    else:
        raise ValueError(f"unknown choice {choice!r}")
    return Transfer(gap.var, gap.index, gap.t_last, pre, choice)


@dataclass
class ConstraintReport:
    violations: list = field(default_factory=list)
    charged: list = field(default_factory=list)  # C4 overruns, charged as delay

    @property
    def ok(self) -> bool:
        return not self.violations


def check_constraints(plan: OffloadPlan, trace: PhaseTrace) -> ConstraintReport:
    rep = ConstraintReport()
    seen = set()
    for t in plan.transfers:
        if t.var not in trace.variables:
            rep.violations.append(("unknown", t.var, t.gap))
            continue
        gaps = trace.gaps(t.var)
        if not 0 <= t.gap < len(gaps):
            rep.violations.append(("unknown", t.var, t.gap))
            continue
        if (t.var, t.gap) in seen:
            rep.violations.append(("duplicate", t.var, t.gap))
        seen.add((t.var, t.gap))
        gap = gaps[t.gap]
        dt = trace.transfer_time(t.var)
        if not trace.variables[t.var].eligible:
            rep.violations.append(("eligibility", t.var, t.gap))
        if t.offload_start < gap.t_last:
            rep.violations.append(("access", t.var, t.gap))
        if t.prefetch_start < t.offload_start + dt:
            rep.violations.append(("C1", t.var, t.gap))
        if gap.t_next - t.prefetch_start <= 0 or gap.mpd <= 0:
            rep.violations.append(("C2", t.var, t.gap))
        if not dt < gap.mpd:
            rep.violations.append(("C3", t.var, t.gap))
        if t.prefetch_start + dt > gap.next_phase_start:
            rep.charged.append(("C4", t.var, t.gap))
    return rep


@dataclass
class Timeline:
    """Simulated transfer times for one iteration."""

    events: list  # (kind, var, gap, start, end)
    peak: float
    delay: float


def _simulate_timeline(plan: OffloadPlan, trace: PhaseTrace) -> Timeline:
    # a single transfer channel serves requests in order of requested start
    requests = []
    for t in plan.transfers:
        requests.append((t.offload_start, 0, t.var, t.gap, "offload"))
        requests.append((t.prefetch_start, 1, t.var, t.gap, "prefetch"))
    requests.sort()
    free_at = -math.inf
    done = {}
    events = []
    for req, _, var, gap, kind in requests:
        start = max(req, free_at)
        if kind == "prefetch":
            start = max(start, done[(var, gap, "offload")])
        end = start + trace.transfer_time(var)
        free_at = end
        done[(var, gap, kind)] = end
        events.append((kind, var, gap, start, end))
    starts = {(e[1], e[2], e[0]): e[3] for e in events}
    T = trace.iteration_time
    gaps = {v: trace.gaps(v) for v in {t.var for t in plan.transfers}}
    delay = 0.0
    absent = []  # (start, end, size), non-resident intervals
    for t in plan.transfers:
        gap = gaps[t.var][t.gap]
        off_end = done[(t.var, t.gap, "offload")]
        pre_start = starts[(t.var, t.gap, "prefetch")]
        pre_end = done[(t.var, t.gap, "prefetch")]
        delay += max(0.0, pre_end - gap.next_phase_start)
        if pre_start > off_end:
            absent.append((off_end, pre_start, trace.variables[t.var].size))
    peak = _peak_level(trace.persistent_total(), absent, trace.scratch_intervals(), T)
    return Timeline(events, peak, delay)


def _wrap(intervals: list, period: float) -> list:
    out = []
    for a, b, size in intervals:
        if b - a >= period:
            out.append((0.0, period, size))
            continue
        a_mod = a % period
        end = a_mod + (b - a)
        if end <= period:
            out.append((a_mod, end, size))
        else:
            out += [(a_mod, period, size), (0.0, end - period, size)]
    return out


def _peak_level(total: float, absent: list, extra: list, period: float) -> float:
    """Peak over one period of ``total - absent(t) + extra(t)``.

    ``absent`` and ``extra`` hold ``(start, end, size)`` intervals, taken
    modulo ``period``.  The level is evaluated on every elementary segment
    between interval endpoints.
    """
    pieces = [(a, b, -s) for a, b, s in _wrap(absent, period)]
    pieces += _wrap(extra, period)
    if not pieces:
        return total
    cuts = sorted({0.0, period, *(p[0] for p in pieces), *(p[1] for p in pieces)})
    peak = -math.inf
    for lo, hi in zip(cuts, cuts[1:]):
        if hi <= lo:
            continue
        mid = 0.5 * (lo + hi)
        peak = max(peak, total + sum(s for a, b, s in pieces if a <= mid < b))
    return peak


def simulate(plan: OffloadPlan, trace: PhaseTrace) -> tuple[float, float, PlanScore]:
    """Return ``(peak_memory, exposed_delay, score)`` for ``plan``."""
    tl = _simulate_timeline(plan, trace)
    base = trace.baseline_peak()
    M = max(0.0, 1.0 - tl.peak / base)
    T = tl.delay / trace.iteration_time
    return tl.peak, tl.delay, score(M, T, peak=tl.peak, base_peak=base, delay=tl.delay)


def candidate_gaps(trace: PhaseTrace) -> list[Gap]:
    """Gaps of eligible variables that can hold an offload (MPD > copy time)."""
    out = []
    for name in sorted(trace.variables):
        v = trace.variables[name]
        if not v.eligible or not trace.accesses_of(name):
            continue
        for gap in trace.gaps(name):
            if gap.mpd > 0 and trace.transfer_time(name) < gap.mpd:
                out.append(gap)
    return out


def _feasible_choices(trace: PhaseTrace, gap: Gap) -> list:
    opts = [(NONE, None)]
    for choice in (EARLY, LATE):
        t = make_transfer(trace, gap, choice)
        if check_constraints(OffloadPlan([t]), trace).ok:
            opts.append((choice, t))
    return opts


def plan_search(trace: PhaseTrace) -> tuple[OffloadPlan, PlanScore]:
    """Exhaustive search over the per-gap choices; best by ``(MT, M)``.

    Ties go to the plan whose choice sequence (gaps in variable-name order,
    ``none < early < late``) is lexicographically smallest.
    """
    gaps = candidate_gaps(trace)
    options = [_feasible_choices(trace, g) for g in gaps]
    best_plan, best_score, best_key = OffloadPlan(), score(0.0, 0.0), None
    best_score = simulate(best_plan, trace)[2]
    best_key = (best_score.rank_key(), tuple(0 for _ in gaps))
    for combo in itertools.product(*options):
        transfers = [t for _, t in combo if t is not None]
        if not transfers:
            continue
        plan = OffloadPlan(transfers)
        sc = simulate(plan, trace)[2]
        order = tuple(CHOICES.index(c) for c, _ in combo)
        key = (sc.rank_key(), order)
        if (key[0] > best_key[0]) or (key[0] == best_key[0] and order < best_key[1]):
            best_plan, best_score, best_key = plan, sc, key
    return best_plan, best_score


def lru_baseline(trace: PhaseTrace, memory_budget: float) -> PlanScore:
    """Demand fetching with least-recently-used eviction under ``memory_budget``.

    Evicting is free (no write-back time); every fetch stalls execution for
    ``size / bandwidth``.  Only eligible variables not in use may be evicted;
    scratch buffers always count.  Two iterations are simulated starting from
    an all-resident state and the second (steady state) is reported.
    """
    sizes = {n: v.size for n, v in trace.variables.items()}
    if memory_budget < max(sizes.values()):
        raise InfeasibleBudget("budget is smaller than the largest variable")
    T = trace.iteration_time
    # (time, kind, name, end); kind 0 = release, 1 = acquire, so releases at a
    # given instant happen before acquires
    events = []
    for k in range(2):
        for a in trace.accesses:
            t0 = k * T + trace.phase_start(a.phase)
            events.append((t0 + a.first, 1, "v", a.var, t0 + a.last, k))
            events.append((t0 + a.last, 0, "v", a.var, t0 + a.last, k))
        for lo, hi, size in trace.scratch_intervals():
            events.append((k * T + lo, 1, "s", size, k * T + hi, k))
            events.append((k * T + hi, 0, "s", size, k * T + hi, k))
    events.sort(key=lambda e: (e[0], e[1]))
    last_use = {n: -1.0 for n in sizes}
    in_use = {n: 0 for n in sizes}
    resident = set(sizes)
    scratch_used = 0.0
    peak, delay = [0.0, 0.0], [0.0, 0.0]

    def used():
        return scratch_used + sum(sizes[n] for n in resident)

    def make_room(extra, keep):
        while used() + extra > memory_budget:
            victims = [n for n in resident if trace.variables[n].eligible
                       and in_use[n] == 0 and n != keep]
            if not victims:
                raise InfeasibleBudget(f"budget {memory_budget:g} cannot hold the live set")
            resident.remove(min(victims, key=lambda n: (last_use[n], n)))

    for t, kind, what, item, end, k in events:
        if what == "s":
            if kind == 1:
                make_room(item, None)
                scratch_used += item
            else:
                scratch_used -= item
        elif kind == 1:
            if item not in resident:
                make_room(sizes[item], item)
                resident.add(item)
                delay[k] += sizes[item] / trace.bandwidth
            else:
                make_room(0.0, item)
            in_use[item] += 1
            last_use[item] = max(last_use[item], end)
        else:
            in_use[item] -= 1
        peak[k] = max(peak[k], used())
    base = trace.baseline_peak()
    M = max(0.0, 1.0 - peak[1] / base)
    return score(M, delay[1] / T, peak=peak[1], base_peak=base, delay=delay[1])


def plan_to_csv(plan: OffloadPlan, sc: PlanScore) -> str:
    lines = ["var,gap,choice,offload_start_ms,prefetch_start_ms"]
    lines += [f"{t.var},{t.gap},{t.choice},{t.offload_start:.6g},{t.prefetch_start:.6g}"
              for t in plan.transfers]
    lines.append(f"# M={sc.M:.6g},T={sc.T:.6g},MT={sc.MT:.6g},peak={sc.peak:.6g}")
    return "\n".join(lines) + "\n"
