"""Mamdani fuzzy scoring of a principal's history.

Three factors are derived from a chain's aggregates (reliability,
contextual relevance, historical engagement), fuzzified with triangular
membership functions, run through a min/max rule base and defuzzified by
centroid into a decision score in [0, 1].

Rule-base text format (``#`` starts a comment)::

    VARIABLE reliability
    TERM Low 0 0 0.5
    TERM Medium 0 0.5 1
    TERM High 0.5 1 1
    ...
    OUTPUT decision
    TERM Deny-leaning 0 0 0.5
    ...
    IF reliability IS High AND relevance IS Medium AND engagement IS Low THEN Cautious
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

import numpy as np

from .aggregates import DEFAULT_HALF_LIFE_MS, IncrementalAggregates, resource_class
from .errors import EmptyAggregate, OutOfDomain, RuleBaseError, UncoveredInput

if TYPE_CHECKING:
    from .engine import AccessRequest, EngineConfig

GRID_STEP = 1e-3
GRID = np.linspace(0.0, 1.0, 1001)

FACTOR_NAMES = ("reliability", "relevance", "engagement")
INPUT_TERMS = ("Low", "Medium", "High")
OUTPUT_TERMS = ("Deny-leaning", "Cautious", "Grant-leaning")


@dataclass(frozen=True)
class FuzzyFactors:
    reliability: float
    contextual_relevance: float
    historical_engagement: float

    def __post_init__(self) -> None:
        if not (
            0.0 <= self.reliability <= 1.0
            and 0.0 <= self.contextual_relevance <= 1.0
            and 0.0 <= self.historical_engagement <= 1.0
        ):
            for name, v in self.as_dict().items():
                if not 0.0 <= v <= 1.0:
                    raise OutOfDomain(f"{name}={v} outside [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return {
            "reliability": self.reliability,
            "relevance": self.contextual_relevance,
            "engagement": self.historical_engagement,
        }


@dataclass(frozen=True)
class MembershipFunction:
    """Triangle with feet ``a``, ``c`` and peak ``b``; ``a == b`` or ``b == c`` gives a shoulder."""

    a: float
    b: float
    c: float

    def __post_init__(self) -> None:
        if not self.a <= self.b <= self.c:
            raise RuleBaseError(f"triangle needs a <= b <= c, got {(self.a, self.b, self.c)}")

    def __call__(self, x: float) -> float:
        if x < self.a or x > self.c:
            return 0.0
        if x == self.b:
            return 1.0
        if x < self.b:
            return (x - self.a) / (self.b - self.a)
        return (self.c - x) / (self.c - self.b)

    def sample(self, xs: np.ndarray) -> np.ndarray:
        a, b, c = self.a, self.b, self.c
        rise = (xs - a) / (b - a) if b > a else np.ones_like(xs)
        fall = (c - xs) / (c - b) if c > b else np.ones_like(xs)
        out = np.where(xs <= b, rise, fall)
        out = np.where((xs < a) | (xs > c), 0.0, out)
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class LinguisticVariable:
    name: str
    terms: Mapping[str, MembershipFunction]

    def __post_init__(self) -> None:
        if not self.terms:
            raise RuleBaseError(f"variable {self.name!r} has no terms")


def ruspini_variable(name: str, term_names: Sequence[str] = INPUT_TERMS) -> LinguisticVariable:
    """Evenly spaced triangular partition of [0, 1] (degrees sum to 1 everywhere)."""
    k = len(term_names) - 1
    peaks = [i / k for i in range(k + 1)]
    terms = {}
    for i, term in enumerate(term_names):
        terms[term] = MembershipFunction(peaks[max(i - 1, 0)], peaks[i], peaks[min(i + 1, k)])
    return LinguisticVariable(name, terms)


def fuzzify(value: float, variable: LinguisticVariable) -> dict[str, float]:
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise OutOfDomain(f"{variable.name}={value} outside [0, 1]")
    return {term: mf(value) for term, mf in variable.terms.items()}


@dataclass(frozen=True)
class FuzzyRule:
    antecedent: tuple[tuple[str, str], ...]  # ((factor, term), ...) joined by AND
    consequent: str

    def __str__(self) -> str:
        cond = " AND ".join(f"{f} IS {t}" for f, t in self.antecedent)
        return f"IF {cond} THEN {self.consequent}"


class RuleBase:
    """A complete rule table over ``inputs`` with its output variable.

    The output terms are pre-sampled on ``GRID`` so inference is a handful
    of vector operations.
    """

    def __init__(
        self,
        inputs: Sequence[LinguisticVariable],
        output: LinguisticVariable,
        rules: Sequence[FuzzyRule],
    ) -> None:
        self.inputs = tuple(inputs)
        self.output = output
        self.rules = tuple(rules)
        self._validate()
        self.output_curves = {t: mf.sample(GRID) for t, mf in output.terms.items()}
        self._curve_stack = np.stack([self.output_curves[t] for t in output.terms])
        self._curve_rows = [np.ascontiguousarray(row) for row in self._curve_stack]
        # rule lookup by term-index tuple; complete coverage means every
        # combination of input terms maps to exactly one output term
        self._mfs = [tuple(v.terms.values()) for v in self.inputs]
        term_pos = [{t: i for i, t in enumerate(v.terms)} for v in self.inputs]
        out_pos = {t: i for i, t in enumerate(output.terms)}
        self._table: dict[tuple[int, ...], int] = {}
        for r in self.rules:
            ante = dict(r.antecedent)
            key = tuple(pos[ante[v.name]] for pos, v in zip(term_pos, self.inputs))
            self._table[key] = out_pos[r.consequent]
        self._tris = [[(mf.a, mf.b, mf.c) for mf in mfs] for mfs in self._mfs]
        names = [v.name for v in self.inputs]
        # position of each input within FACTOR_NAMES, if they are all factors
        self._factor_order = tuple(FACTOR_NAMES.index(n) for n in names) if set(names) <= set(FACTOR_NAMES) else None
        self._nested: Optional[list] = None
        if len(self.inputs) == 3:
            n0, n1, n2 = (len(v.terms) for v in self.inputs)
            self._nested = [[[self._table[(i, j, k)] for k in range(n2)] for j in range(n1)] for i in range(n0)]

    def strengths(self, degrees: Sequence[Sequence[float]]) -> np.ndarray:
        """Max firing strength per output term, given per-variable degree vectors.

        Only rules whose every antecedent degree is non-zero can fire, so
        just those combinations are visited.
        """
        return np.array(self._strengths(degrees))

    def _strengths(self, degrees: Sequence[Sequence[float]]) -> list[float]:
        return self._fire([[(i, d) for i, d in enumerate(deg) if d > 0.0] for deg in degrees])

    def _fire(self, lives: Sequence[Sequence[tuple[int, float]]]) -> list[float]:
        # lives[v]: (term index, degree) pairs with non-zero degree
        out = [0.0] * len(self.output.terms)
        if self._nested is not None:
            l0, l1, l2 = lives
            for i0, d0 in l0:
                t0 = self._nested[i0]
                for i1, d1 in l1:
                    m = d0 if d0 < d1 else d1
                    t1 = t0[i1]
                    for i2, d2 in l2:
                        w = m if m < d2 else d2
                        k = t1[i2]
                        if w > out[k]:
                            out[k] = w
            return out
        table = self._table
        for combo in itertools.product(*lives):
            ids, ds = zip(*combo)
            k = table[ids]
            w = min(ds)
            if w > out[k]:
                out[k] = w
        return out

    def _live_degrees(self, xs: Sequence[float]) -> list[list[tuple[int, float]]]:
        """Non-zero memberships of each crisp input (same arithmetic as
        ``MembershipFunction.__call__``)."""
        lives = []
        for tris, x in zip(self._tris, xs):
            live = []
            for i, (a, b, c) in enumerate(tris):
                if x < a or x > c:
                    continue
                if x == b:
                    d = 1.0
                elif x < b:
                    d = (x - a) / (b - a)
                else:
                    d = (c - x) / (c - b)
                if d > 0.0:
                    live.append((i, d))
            lives.append(live)
        return lives

    def aggregate(self, strengths: Sequence[float]) -> np.ndarray:
        """Pointwise max of the output curves clipped at their strengths."""
        # curves are non-negative, so a zero-strength term contributes nothing
        live = [(row, s) for row, s in zip(self._curve_rows, strengths) if s > 0.0]
        if not live:
            return np.zeros_like(GRID)
        row, s = live[0]
        out = np.minimum(row, s)
        for row, s in live[1:]:
            np.maximum(out, np.minimum(row, s), out=out)
        return out

    def _score(self, xs: Sequence[float]) -> float:
        """Centroid score for crisp inputs ``xs`` in one pass.

        Same arithmetic as fuzzify -> infer -> defuzzify_centroid; folded
        together because this is the per-request hot path.
        """
        out = self._fire(self._live_degrees(xs))
        mu = None
        for row, s in zip(self._curve_rows, out):
            if s > 0.0:
                if mu is None:
                    mu = np.minimum(row, s)
                else:
                    np.maximum(mu, np.minimum(row, s), out=mu)
        if mu is None:
            raise UncoveredInput("no rule fired")
        area = _AREA_W.dot(mu)
        if area <= 0.0:
            raise EmptyAggregate("aggregate membership is identically zero")
        ds = float(_MOMENT_W.dot(mu) / area)
        return 0.0 if ds < 0.0 else 1.0 if ds > 1.0 else ds

    def _validate(self) -> None:
        by_name = {v.name: v for v in self.inputs}
        if len(by_name) != len(self.inputs):
            raise RuleBaseError("duplicate input variable names")
        seen: set[tuple[tuple[str, str], ...]] = set()
        for rule in self.rules:
            for factor, term in rule.antecedent:
                if factor not in by_name:
                    raise RuleBaseError(f"rule references unknown variable {factor!r}: {rule}")
                if term not in by_name[factor].terms:
                    raise RuleBaseError(f"rule references unknown term {factor}.{term}: {rule}")
            if rule.consequent not in self.output.terms:
                raise RuleBaseError(f"rule references unknown output term {rule.consequent!r}")
            key = tuple(sorted(rule.antecedent))
            if len({f for f, _ in key}) != len(key):
                raise RuleBaseError(f"rule names a variable twice: {rule}")
            if key in seen:
                raise RuleBaseError(f"duplicate antecedent: {rule}")
            seen.add(key)
        names = [v.name for v in self.inputs]
        for combo in itertools.product(*(v.terms for v in self.inputs)):
            if tuple(sorted(zip(names, combo))) not in seen:
                missing = " AND ".join(f"{n} IS {t}" for n, t in zip(names, combo))
                raise RuleBaseError(f"rule base does not cover: {missing}")


def level_sum_rules(
    factors: Sequence[str] = FACTOR_NAMES,
    input_terms: Sequence[str] = INPUT_TERMS,
    output_terms: Sequence[str] = OUTPUT_TERMS,
) -> list[FuzzyRule]:
    """Monotone default table: Deny-leaning if the term levels sum <= 2,
    Cautious for 3..4, Grant-leaning for >= 5."""
    rules = []
    for combo in itertools.product(range(len(input_terms)), repeat=len(factors)):
        s = sum(combo)
        out = output_terms[0] if s <= 2 else output_terms[1] if s <= 4 else output_terms[2]
        rules.append(FuzzyRule(tuple((f, input_terms[i]) for f, i in zip(factors, combo)), out))
    return rules


def build_default_rulebase() -> RuleBase:
    return RuleBase(
        [ruspini_variable(f) for f in FACTOR_NAMES],
        ruspini_variable("decision", OUTPUT_TERMS),
        level_sum_rules(),
    )


# -- rule-base files -------------------------------------------------------


def _num(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise RuleBaseError(f"line {lineno}: expected a number, got {tok!r}") from None


def parse_rulebase(text: str) -> RuleBase:
    inputs: list[tuple[str, dict[str, MembershipFunction]]] = []
    output: Optional[tuple[str, dict[str, MembershipFunction]]] = None
    current: Optional[dict[str, MembershipFunction]] = None
    rules: list[FuzzyRule] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        head = toks[0].upper()
        if head in ("VARIABLE", "OUTPUT"):
            if len(toks) != 2:
                raise RuleBaseError(f"line {lineno}: expected '{head} <name>'")
            current = {}
            if head == "OUTPUT":
                if output is not None:
                    raise RuleBaseError(f"line {lineno}: second OUTPUT variable")
                output = (toks[1], current)
            else:
                inputs.append((toks[1], current))
        elif head == "TERM":
            if current is None or len(toks) != 5:
                raise RuleBaseError(f"line {lineno}: expected 'TERM <name> a b c' inside a variable")
            if toks[1] in current:
                raise RuleBaseError(f"line {lineno}: duplicate term {toks[1]!r}")
            current[toks[1]] = MembershipFunction(*(_num(t, lineno) for t in toks[2:]))
        elif head == "IF":
            rules.append(_parse_rule(toks, lineno))
        else:
            raise RuleBaseError(f"line {lineno}: unrecognised statement {toks[0]!r}")
    if output is None:
        raise RuleBaseError("no OUTPUT variable declared")
    return RuleBase(
        [LinguisticVariable(n, t) for n, t in inputs],
        LinguisticVariable(*output),
        rules,
    )


def _parse_rule(toks: list[str], lineno: int) -> FuzzyRule:
    # IF v IS t (AND v IS t)* THEN out
    try:
        then = [t.upper() for t in toks].index("THEN")
    except ValueError:
        raise RuleBaseError(f"line {lineno}: rule without THEN") from None
    if then != len(toks) - 2:
        raise RuleBaseError(f"line {lineno}: expected a single output term after THEN")
    body = toks[1:then]
    clauses = []
    for i in range(0, len(body), 4):
        chunk = body[i:i + 4]
        if len(chunk) < 3 or chunk[1].upper() != "IS" or (len(chunk) == 4 and chunk[3].upper() != "AND"):
            raise RuleBaseError(f"line {lineno}: malformed condition {' '.join(chunk)!r}")
        clauses.append((chunk[0], chunk[2]))
    if not clauses or body[-1].upper() == "AND":
        raise RuleBaseError(f"line {lineno}: empty or dangling condition")
    return FuzzyRule(tuple(clauses), toks[-1])


def _fmt(x: float) -> str:
    return f"{x:g}"


def format_rulebase(rb: RuleBase) -> str:
    lines = []
    for var in rb.inputs:
        lines.append(f"VARIABLE {var.name}")
        lines += [f"TERM {t} {_fmt(m.a)} {_fmt(m.b)} {_fmt(m.c)}" for t, m in var.terms.items()]
        lines.append("")
    lines.append(f"OUTPUT {rb.output.name}")
    lines += [f"TERM {t} {_fmt(m.a)} {_fmt(m.b)} {_fmt(m.c)}" for t, m in rb.output.terms.items()]
    lines.append("")
    lines += [str(r) for r in rb.rules]
    return "\n".join(lines) + "\n"


def load_rulebase(path: Path | str) -> RuleBase:
    return parse_rulebase(Path(path).read_text("utf-8"))


@lru_cache(maxsize=None)
def default_rulebase() -> RuleBase:
    """The shipped ``default_rules.fis`` (equal to ``build_default_rulebase``)."""
    text = resources.files("ipbac").joinpath("data/default_rules.fis").read_text("utf-8")
    return parse_rulebase(text)


@lru_cache(maxsize=32)
def _cached_rulebase(path: str, mtime: float) -> RuleBase:
    return load_rulebase(path)


def rulebase_for(path: Optional[str]) -> RuleBase:
    if not path:
        return default_rulebase()
    p = Path(path)
    return _cached_rulebase(str(p.resolve()), p.stat().st_mtime)


# -- inference -------------------------------------------------------------


def infer(memberships: Mapping[str, Mapping[str, float]], rulebase: RuleBase) -> np.ndarray:
    """Mamdani min/max aggregation sampled on ``GRID``.

    Clipping each consequent at its rule's strength and taking the pointwise
    max equals clipping each output term at the max strength of the rules
    that conclude it, which is what is computed here.
    """
    try:
        degrees = [[memberships[v.name][t] for t in v.terms] for v in rulebase.inputs]
    except KeyError as exc:
        raise UncoveredInput(f"no membership degree for {exc.args[0]!r}") from None
    strengths = rulebase.strengths(degrees)
    if not strengths.any():
        raise UncoveredInput("no rule fired")
    return rulebase.aggregate(strengths)


def _centroid_weights(grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weights turning samples into the exact area and first moment of the
    piecewise-linear interpolant."""
    h = np.diff(grid)
    area = np.zeros_like(grid)
    area[:-1] += h / 2
    area[1:] += h / 2
    moment = np.zeros_like(grid)
    moment[:-1] += h * (2 * grid[:-1] + grid[1:]) / 6
    moment[1:] += h * (grid[:-1] + 2 * grid[1:]) / 6
    return area, moment


_GRID_WEIGHTS = np.stack(_centroid_weights(GRID))
_AREA_W, _MOMENT_W = (np.ascontiguousarray(w) for w in _GRID_WEIGHTS)


def defuzzify_centroid(curve: np.ndarray, grid: np.ndarray = GRID) -> float:
    """Centroid of a sampled membership curve.

    The samples are treated as a piecewise-linear curve whose area and
    first moment are integrated exactly; this keeps the result within about
    1e-6 of the continuous centroid on the default 1e-3 grid.
    """
    mu = np.asarray(curve, dtype=float)
    if mu.shape != grid.shape:
        raise ValueError("curve and grid lengths differ")
    if mu.min() < 0:
        raise ValueError("membership curve must be non-negative")
    return _centroid(mu, None if grid is GRID else np.stack(_centroid_weights(grid)))


def _centroid(mu: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    if weights is None:
        area, moment = _AREA_W.dot(mu), _MOMENT_W.dot(mu)
    else:
        area, moment = weights @ mu
    if area <= 0.0:
        raise EmptyAggregate("aggregate membership is identically zero")
    return min(max(float(moment / area), 0.0), 1.0)


# -- factors and the composed score -----------------------------------------


@dataclass(frozen=True)
class FactorParams:
    kappa: float = 50.0
    half_life_ms: float = DEFAULT_HALF_LIFE_MS

    def __post_init__(self) -> None:
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.half_life_ms > 0:
            raise ValueError("half_life_ms must be positive")


def _factor_values(
    aggregates: IncrementalAggregates, request: "AccessRequest", params: FactorParams
) -> tuple[float, float, float]:
    if aggregates.half_life_ms != params.half_life_ms:
        raise ValueError(
            f"aggregates use half-life {aggregates.half_life_ms} ms, params ask for {params.half_life_ms} ms"
        )
    n = aggregates.total_interactions
    reliability = (aggregates.successful_interactions + 1) / (n + 2)
    class_mass, total_mass = aggregates.mass_at(resource_class(request.resource), request.requested_at)
    relevance = min(max(class_mass / (total_mass + 1.0), 0.0), 1.0)
    engagement = 1.0 - math.exp(-n / params.kappa)
    return reliability, relevance, engagement


def compute_factors(
    aggregates: IncrementalAggregates, request: "AccessRequest", params: FactorParams = FactorParams()
) -> FuzzyFactors:
    return FuzzyFactors(*_factor_values(aggregates, request, params))


def _ordered_inputs(values: Sequence[float], rulebase: RuleBase) -> list[float]:
    order = rulebase._factor_order
    if order is None:
        unknown = sorted(v.name for v in rulebase.inputs if v.name not in FACTOR_NAMES)
        raise RuleBaseError(f"rule base inputs {unknown} are not among {list(FACTOR_NAMES)}")
    return [values[i] for i in order]


def score_factors(factors: FuzzyFactors, rulebase: RuleBase) -> float:
    """fuzzify -> infer -> defuzzify_centroid, without the intermediate dicts."""
    values = (factors.reliability, factors.contextual_relevance, factors.historical_engagement)
    return rulebase._score(_ordered_inputs(values, rulebase))


def compute_ds(aggregates: IncrementalAggregates, request: "AccessRequest", config: "EngineConfig") -> float:
    """compute_factors -> score_factors for one request."""
    values = _factor_values(aggregates, request, config.factor_params)
    for name, v in zip(FACTOR_NAMES, values):
        if not 0.0 <= v <= 1.0:
            raise OutOfDomain(f"{name}={v} outside [0, 1]")
    rulebase = rulebase_for(config.rule_base_path)
    return rulebase._score(_ordered_inputs(values, rulebase))
