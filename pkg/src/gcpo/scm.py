"""Exact-enumeration laboratory for the fork-collider SCM.

Variables are ``q``, ``y0 .. y{n-1}`` and ``yn``: the responses are drawn
independently given the query, and the collider ``yn`` depends on the query
and every response.  Everything here works on the dense joint table, so
conditional expectations, projections and risk gaps are exact up to float
rounding.

The projection ``phi`` is conditional expectation onto functions of
``(q, y1 .. y{n-1})`` and ``psi = id - phi``; ``y0`` is the prediction target.
"""

from __future__ import annotations

import configparser
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CELL_BUDGET = 10**7
ROW_TOL = 1e-12
FILE_ROW_TOL = 1e-9


class SCMError(ValueError):
    """Invalid SCM definition or file."""


class ConditioningError(ValueError):
    """Conditioning on an event of probability zero."""


class BudgetError(ValueError):
    """Joint table would exceed the cell budget."""


def variable_names(n: int) -> tuple[str, ...]:
    return ("q",) + tuple(f"y{i}" for i in range(n)) + ("yn",)


def _check_rows(arr: np.ndarray, what: str, tol: float = ROW_TOL) -> None:
    if not np.all(np.isfinite(arr)):
        raise SCMError(f"{what}: non-finite entries")
    if np.any(arr < 0) or np.any(arr > 1):
        raise SCMError(f"{what}: entries outside [0, 1]")
    sums = arr.sum(axis=-1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise SCMError(f"{what}: row {idx} sums to {sums[idx]!r}, not 1")


@dataclass(frozen=True)
class FiniteSCM:
    """Discrete SCM with the fork-collider topology.

    ``response_kernel[q, y]`` is p(y_i = y | q), shared by all responses.
    ``collider_kernel`` has shape ``(Q, R, ..., R, C)`` with n response axes and
    holds p(yn | q, y0, .., y{n-1}).
    """

    query_prior: np.ndarray
    response_kernel: np.ndarray
    collider_kernel: np.ndarray
    n: int

    def __post_init__(self):
        prior = np.asarray(self.query_prior, dtype=np.float64)
        resp = np.asarray(self.response_kernel, dtype=np.float64)
        coll = np.asarray(self.collider_kernel, dtype=np.float64)
        object.__setattr__(self, "query_prior", prior)
        object.__setattr__(self, "response_kernel", resp)
        object.__setattr__(self, "collider_kernel", coll)
        if self.n < 2:
            raise SCMError(f"need n >= 2 responses, got {self.n}")
        if prior.ndim != 1 or prior.size < 1:
            raise SCMError("query_prior must be a non-empty vector")
        if resp.ndim != 2 or resp.shape[0] != prior.size:
            raise SCMError(f"response_kernel shape {resp.shape} does not match query card {prior.size}")
        want = (prior.size,) + (resp.shape[1],) * self.n
        if coll.ndim != self.n + 2 or coll.shape[:-1] != want:
            raise SCMError(f"collider_kernel shape {coll.shape} does not match {want} + (collider card,)")
        _check_rows(prior, "query_prior")
        _check_rows(resp, "response_kernel")
        _check_rows(coll, "collider_kernel")

    @property
    def query_card(self) -> int:
        return self.query_prior.size

    @property
    def response_card(self) -> int:
        return self.response_kernel.shape[1]

    @property
    def collider_card(self) -> int:
        return self.collider_kernel.shape[-1]

    @property
    def names(self) -> tuple[str, ...]:
        return variable_names(self.n)


@dataclass(frozen=True)
class JointTable:
    names: tuple[str, ...]
    probs: np.ndarray

    @property
    def dims(self) -> tuple[int, ...]:
        return self.probs.shape

    @property
    def n(self) -> int:
        return len(self.names) - 2

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown variable {name!r}; have {self.names}") from None

    def marginal(self, keep) -> np.ndarray:
        """Marginal over ``keep`` with singleton axes retained (broadcastable)."""
        drop = tuple(i for i, v in enumerate(self.names) if v not in keep)
        return self.probs.sum(axis=drop, keepdims=True)


@dataclass(frozen=True)
class Predictor:
    """Real-valued function of the variables in ``conditioning_set``.

    ``values`` has one axis per conditioning variable, in the listed order.
    """

    values: np.ndarray
    conditioning_set: tuple[str, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "conditioning_set", tuple(self.conditioning_set))
        if vals.ndim != len(self.conditioning_set):
            raise ValueError(
                f"values have {vals.ndim} axes but conditioning set {self.conditioning_set} has "
                f"{len(self.conditioning_set)}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("predictor values must be finite")

    def on(self, table: JointTable) -> np.ndarray:
        """Broadcast to the joint table's axes."""
        missing = [v for v in self.conditioning_set if v not in table.names]
        if missing:
            raise KeyError(f"predictor conditions on {missing}, not in {table.names}")
        order = sorted(range(len(self.conditioning_set)), key=lambda k: table.axis(self.conditioning_set[k]))
        vals = np.transpose(self.values, order)
        shape = [1] * len(table.names)
        for k in order:
            ax = table.axis(self.conditioning_set[k])
            shape[ax] = table.dims[ax]
        return vals.reshape(shape)


@dataclass
class ProjectionReport:
    delta: float
    phi_residual_sq: float
    psi_norm_sq: float
    identity_holds: bool
    identity_gap: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "delta": self.delta,
            "phi_residual_sq": self.phi_residual_sq,
            "psi_norm_sq": self.psi_norm_sq,
            "identity_holds": self.identity_holds,
            "identity_gap": self.identity_gap,
        }
        out.update(self.extra)
        return out


# ---------------------------------------------------------------- construction


def build_joint(scm: FiniteSCM, budget: int = DEFAULT_CELL_BUDGET) -> JointTable:
    dims = (scm.query_card,) + (scm.response_card,) * scm.n + (scm.collider_card,)
    cells = math.prod(dims)
    if cells > budget:
        raise BudgetError(f"joint table needs {cells} cells, budget is {budget}")
    k = scm.n + 2
    p = scm.query_prior.reshape((-1,) + (1,) * (k - 1))
    for i in range(scm.n):
        shape = [1] * k
        shape[0], shape[1 + i] = scm.query_card, scm.response_card
        p = p * scm.response_kernel.reshape(shape)
    p = p * scm.collider_kernel
    return JointTable(scm.names, p)


def xor_scm(query_card: int = 2) -> FiniteSCM:
    """n=2, fair binary responses independent of q, yn = y0 XOR y1."""
    prior = np.full(query_card, 1.0 / query_card)
    resp = np.full((query_card, 2), 0.5)
    coll = np.zeros((query_card, 2, 2, 2))
    for q, a, b in itertools.product(range(query_card), range(2), range(2)):
        coll[q, a, b, a ^ b] = 1.0
    return FiniteSCM(prior, resp, coll, n=2)


def random_scm(rng: np.random.Generator, n: int, query_card: int, response_card: int,
               collider_card: int | None = None) -> FiniteSCM:
    """Full-support SCM with Dirichlet(1, .., 1) rows."""
    collider_card = response_card if collider_card is None else collider_card
    prior = rng.dirichlet(np.ones(query_card))
    resp = rng.dirichlet(np.ones(response_card), size=query_card)
    coll = rng.dirichlet(np.ones(collider_card), size=(query_card,) + (response_card,) * n)
    return FiniteSCM(prior, resp, coll, n=n)


# ---------------------------------------------------------------- expectations


def _values_of(table: JointTable, name: str, value_map=None) -> np.ndarray:
    ax = table.axis(name)
    codes = np.arange(table.dims[ax], dtype=np.float64)
    vals = codes if value_map is None else np.array([value_map(int(c)) for c in codes], dtype=np.float64)
    shape = [1] * len(table.names)
    shape[ax] = table.dims[ax]
    return vals.reshape(shape)


def variable(table: JointTable, name: str, value_map=None) -> Predictor:
    """The random variable ``name`` itself as a predictor (integer codes by default)."""
    return Predictor(np.squeeze(_values_of(table, name, value_map), axis=tuple(
        i for i in range(len(table.names)) if table.names[i] != name)), (name,))


def cond_expect(table: JointTable, target: str, given: dict, value_map=None) -> float:
    """E[target | given] where ``given`` maps variable names to values."""
    index = [slice(None)] * len(table.names)
    for name, val in given.items():
        index[table.axis(name)] = int(val)
    sub = table.probs[tuple(index)]
    mass = sub.sum()
    if mass <= 0.0:
        raise ConditioningError(f"P({given}) = 0")
    vals = np.broadcast_to(_values_of(table, target, value_map), table.dims)[tuple(index)]
    return float((sub * vals).sum() / mass)


def expectation(table: JointTable, values: np.ndarray) -> float:
    return float((table.probs * values).sum())


def norm_sq(table: JointTable, f: Predictor | np.ndarray) -> float:
    vals = f.on(table) if isinstance(f, Predictor) else f
    return expectation(table, vals**2)


def _union(table: JointTable, *sets) -> tuple[str, ...]:
    wanted = set().union(*sets)
    return tuple(v for v in table.names if v in wanted)


def _as_predictor(table: JointTable, full: np.ndarray, cset: tuple[str, ...]) -> Predictor:
    """Restrict a broadcastable joint-shaped array to the axes in ``cset``."""
    full = np.broadcast_to(full, table.dims)
    idx = tuple(slice(None) if v in cset else 0 for v in table.names)
    return Predictor(np.array(full[idx]), cset)


def project(f: Predictor, table: JointTable, onto) -> Predictor:
    """Exact E[f | onto]; cells with zero conditioning mass are set to 0."""
    onto = tuple(v for v in table.names if v in set(onto))
    weighted = (table.probs * f.on(table))
    drop = tuple(i for i, v in enumerate(table.names) if v not in onto)
    num = weighted.sum(axis=drop, keepdims=True)
    den = table.probs.sum(axis=drop, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return _as_predictor(table, out, onto)


def phi_set(table: JointTable) -> tuple[str, ...]:
    return ("q",) + tuple(f"y{i}" for i in range(1, table.n))


def x_set(table: JointTable) -> tuple[str, ...]:
    return ("q",) + tuple(f"y{i}" for i in range(1, table.n)) + ("yn",)


def project_phi(f: Predictor, table: JointTable) -> Predictor:
    return project(f, table, phi_set(table))


def combine(table: JointTable, a: Predictor, b: Predictor, sign: float = 1.0) -> Predictor:
    """Pointwise a + sign * b on the union of both index sets."""
    cset = _union(table, a.conditioning_set, b.conditioning_set)
    return _as_predictor(table, a.on(table) + sign * b.on(table), cset)


def project_psi(f: Predictor, table: JointTable) -> Predictor:
    return combine(table, f, project_phi(f, table), sign=-1.0)


def bayes_predictor(table: JointTable, target: str, given, value_map=None) -> Predictor:
    """Exact E[target | given] as a predictor on ``given``."""
    return project(variable(table, target, value_map), table, given)


def risk(table: JointTable, f: Predictor, target: str, value_map=None) -> float:
    y = _values_of(table, target, value_map)
    return expectation(table, (y - f.on(table)) ** 2)


def risk_delta(f1: Predictor, f2: Predictor, table: JointTable, target: str = "y0", value_map=None) -> float:
    """E[(Y - f1)^2] - E[(Y - f2)^2] over the joint table."""
    y = _values_of(table, target, value_map)
    d = (y - f1.on(table)) ** 2 - (y - f2.on(table)) ** 2
    return expectation(table, d)


def inner(table: JointTable, a, b) -> float:
    av = a.on(table) if isinstance(a, Predictor) else a
    bv = b.on(table) if isinstance(b, Predictor) else b
    return expectation(table, av * bv)


# ---------------------------------------------------------------- identity checks


def _baseline(table: JointTable, value_map=None) -> Predictor:
    return bayes_predictor(table, "y0", ("q",), value_map)


def verify_risk_gap(f: Predictor, table: JointTable, value_map=None,
                    delta_tol: float = 1e-10, gap_tol: float = 1e-8) -> ProjectionReport:
    """Risk gap of f against psi f + b, b = E[y0 | q], versus ||phi f - b||^2."""
    b = _baseline(table, value_map)
    phi_f = project_phi(f, table)
    psi_f = combine(table, f, phi_f, sign=-1.0)
    f_proj = combine(table, psi_f, b)
    delta = risk_delta(f, f_proj, table, "y0", value_map)
    resid = norm_sq(table, phi_f.on(table) - b.on(table))
    gap = abs(delta - resid)
    return ProjectionReport(
        delta=delta,
        phi_residual_sq=resid,
        psi_norm_sq=norm_sq(table, psi_f),
        identity_holds=bool(delta >= -delta_tol and gap <= gap_tol),
        identity_gap=gap,
    )


def verify_psi_norm(f: Predictor, table: JointTable, value_map=None,
                      delta_tol: float = 1e-10, gap_tol: float = 1e-8) -> ProjectionReport:
    """Risk gap of b = E[y0 | q] against psi f + b, versus ||psi f||^2.

    ``extra['cross_term']`` is 2 <Y - f, psi f>, the exact difference between
    the risk gap and ||psi f||^2; it vanishes for the Bayes predictor
    E[y0 | x] and for Bayes plus any phi-measurable perturbation.
    """
    b = _baseline(table, value_map)
    psi_f = project_psi(f, table)
    f_proj = combine(table, psi_f, b)
    delta = risk_delta(b, f_proj, table, "y0", value_map)
    psi_sq = norm_sq(table, psi_f)
    y = _values_of(table, "y0", value_map)
    cross = 2.0 * expectation(table, (y - f.on(table)) * psi_f.on(table))
    gap = abs(delta - psi_sq)
    return ProjectionReport(
        delta=delta,
        phi_residual_sq=norm_sq(table, project_phi(f, table).on(table) - b.on(table)),
        psi_norm_sq=psi_sq,
        identity_holds=bool(delta >= -delta_tol and gap <= gap_tol),
        identity_gap=gap,
        extra={"cross_term": cross},
    )


def _cmi_bits(p: np.ndarray, a: int, b: int) -> float:
    """I(A; B | rest) in bits for a dense joint ``p`` (all other axes conditioned)."""
    p_ac = p.sum(axis=b, keepdims=True)
    p_bc = p.sum(axis=a, keepdims=True)
    p_c = p.sum(axis=(a, b), keepdims=True)
    mask = p > 0
    num = p * p_c
    den = p_ac * p_bc
    ratio = np.ones_like(p)
    np.divide(num, den, out=ratio, where=mask)
    return float(np.sum(np.where(mask, p * np.log2(np.where(mask, ratio, 1.0)), 0.0)))


def verify_collider_dependence(table: JointTable) -> tuple[float, float]:
    """(I(y0; y1 | q), I(y0; y1 | q, yn)) in bits."""
    if table.n < 2:
        raise ValueError("need at least two responses")
    keep_q = ("q", "y0", "y1")
    keep_qn = ("q", "y0", "y1", "yn")
    drop = tuple(i for i, v in enumerate(table.names) if v not in keep_q)
    p1 = table.probs.sum(axis=drop)
    drop = tuple(i for i, v in enumerate(table.names) if v not in keep_qn)
    p2 = table.probs.sum(axis=drop)
    # axes after marginalisation keep table order: q, y0, y1[, yn]
    return _cmi_bits(p1, 1, 2), _cmi_bits(p2, 1, 2)


def decomposition_residual(table: JointTable, value_map=None) -> float:
    """max over positive-mass (q, y1..y{n-1}) cells of |E[f* - b | .]|."""
    f_star = bayes_predictor(table, "y0", x_set(table), value_map)
    b = _baseline(table, value_map)
    res = project_phi(combine(table, f_star, b, sign=-1.0), table)
    mass = table.marginal(phi_set(table))
    vals = np.broadcast_to(res.on(table), table.dims)
    mask = np.broadcast_to(mass > 0, table.dims)
    return float(np.max(np.abs(vals[mask]))) if mask.any() else 0.0


# ---------------------------------------------------------------- sweeps


def perturbed_predictors(table: JointTable, rng: np.random.Generator, count: int, scale: float = 0.5,
                         value_map=None):
    """Bayes predictor E[y0 | x] plus seeded Gaussian perturbations on x's index set."""
    f_star = bayes_predictor(table, "y0", x_set(table), value_map)
    for _ in range(count):
        noise = rng.normal(scale=scale, size=f_star.values.shape)
        yield Predictor(f_star.values + noise, f_star.conditioning_set)


def phi_measurable_perturbations(table: JointTable, rng: np.random.Generator, count: int, scale: float = 0.5,
                                 value_map=None):
    """Bayes predictor plus perturbations that depend only on (q, y1..y{n-1})."""
    f_star = bayes_predictor(table, "y0", x_set(table), value_map)
    pset = phi_set(table)
    shape = tuple(table.dims[table.axis(v)] for v in pset)
    for _ in range(count):
        e = Predictor(rng.normal(scale=scale, size=shape), pset)
        yield combine(table, f_star, e)


def projection_algebra(table: JointTable, f: Predictor, g: Predictor) -> dict:
    """Max deviations of the projection identities for one (f, g) pair."""
    phi_f = project_phi(f, table)
    phi_phi_f = project_phi(phi_f, table)
    psi_g = project_psi(g, table)
    psi_phi_f = project_psi(phi_f, table)
    psi_f = project_psi(f, table)
    psi_psi_f = project_psi(psi_f, table)
    mass = table.probs > 0
    fv = np.broadcast_to(f.on(table), table.dims)

    def dev(a):
        return float(np.max(np.abs(np.broadcast_to(a, table.dims)[mass]))) if mass.any() else 0.0

    return {
        "phi_idempotence": dev(phi_phi_f.on(table) - phi_f.on(table)),
        "psi_idempotence": dev(psi_psi_f.on(table) - psi_f.on(table)),
        "psi_after_phi": dev(psi_phi_f.on(table)),
        "orthogonality": abs(inner(table, phi_f, psi_g)),
        "pythagoras": abs(norm_sq(table, fv) - norm_sq(table, phi_f) - norm_sq(table, psi_f)),
    }


# ---------------------------------------------------------------- file format


def _parse_row(text: str, where: str) -> np.ndarray:
    try:
        return np.array([float(tok) for tok in text.replace(",", " ").split()], dtype=np.float64)
    except ValueError as exc:
        raise SCMError(f"{where}: {exc}") from None


def _fix_row(row: np.ndarray, where: str) -> np.ndarray:
    s = row.sum()
    if abs(s - 1.0) > FILE_ROW_TOL:
        raise SCMError(f"{where}: probabilities sum to {s!r}")
    if np.any(row < 0):
        raise SCMError(f"{where}: negative probability")
    return row / s


def _parse_index(key: str, arity: int, where: str) -> tuple[int, ...]:
    try:
        idx = tuple(int(t) for t in key.replace(",", " ").split())
    except ValueError:
        raise SCMError(f"{where}: bad row key {key!r}") from None
    if len(idx) != arity:
        raise SCMError(f"{where}: row key {key!r} needs {arity} indices")
    return idx


def loads_scm(text: str, source: str = "<string>") -> FiniteSCM:
    """Parse the key-value SCM format (see README)."""
    cp = configparser.ConfigParser(delimiters=("=", ":"), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise SCMError(str(exc)) from None
    for sec in ("scm", "query_prior", "response_kernel", "collider_kernel"):
        if not cp.has_section(sec):
            raise SCMError(f"{source}: missing section [{sec}]")
    head = cp["scm"]
    try:
        qc = int(head["query_card"])
        rc = int(head["response_card"])
        n = int(head["n"])
        cc = int(head.get("collider_card", str(rc)))
    except (KeyError, ValueError) as exc:
        raise SCMError(f"{source}: [scm] needs integer query_card, response_card, n ({exc})") from None
    unknown = set(head) - {"query_card", "response_card", "n", "collider_card"}
    if unknown:
        raise SCMError(f"{source}: unknown [scm] keys {sorted(unknown)}")

    prior_sec = cp["query_prior"]
    if set(prior_sec) != {"p"}:
        raise SCMError(f"{source}: [query_prior] must hold exactly one key 'p'")
    prior = _fix_row(_parse_row(prior_sec["p"], "[query_prior]"), "[query_prior]")
    if prior.size != qc:
        raise SCMError(f"{source}: [query_prior] has {prior.size} entries, expected {qc}")

    resp = np.full((qc, rc), np.nan)
    for key, val in cp["response_kernel"].items():
        (q,) = _parse_index(key, 1, "[response_kernel]")
        row = _parse_row(val, f"[response_kernel] {key}")
        if row.size != rc or not 0 <= q < qc:
            raise SCMError(f"{source}: [response_kernel] row {key!r} malformed")
        resp[q] = _fix_row(row, f"[response_kernel] {key}")

    coll = np.full((qc,) + (rc,) * n + (cc,), np.nan)
    for key, val in cp["collider_kernel"].items():
        idx = _parse_index(key, n + 1, "[collider_kernel]")
        row = _parse_row(val, f"[collider_kernel] {key}")
        if row.size != cc or not 0 <= idx[0] < qc or any(not 0 <= v < rc for v in idx[1:]):
            raise SCMError(f"{source}: [collider_kernel] row {key!r} malformed")
        coll[idx] = _fix_row(row, f"[collider_kernel] {key}")

    if np.isnan(resp).any():
        raise SCMError(f"{source}: [response_kernel] is missing rows")
    if np.isnan(coll).any():
        raise SCMError(f"{source}: [collider_kernel] is missing rows")
    return FiniteSCM(prior, resp, coll, n=n)


def load_scm(path) -> FiniteSCM:
    path = Path(path)
    return loads_scm(path.read_text(encoding="utf-8"), source=str(path))


def dumps_scm(scm: FiniteSCM) -> str:
    fmt = lambda row: " ".join(repr(float(x)) for x in row)  # noqa: E731
    lines = [
        "[scm]",
        f"query_card = {scm.query_card}",
        f"response_card = {scm.response_card}",
        f"n = {scm.n}",
        f"collider_card = {scm.collider_card}",
        "",
        "[query_prior]",
        f"p = {fmt(scm.query_prior)}",
        "",
        "[response_kernel]",
    ]
    lines += [f"{q} = {fmt(scm.response_kernel[q])}" for q in range(scm.query_card)]
    lines += ["", "[collider_kernel]"]
    for idx in itertools.product(range(scm.query_card), *[range(scm.response_card)] * scm.n):
        lines.append(f"{','.join(map(str, idx))} = {fmt(scm.collider_kernel[idx])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- full check suite

SUITE_TOL = 1e-8


def verify_suite(table: JointTable, rng: np.random.Generator, sweep: int = 20, tol: float = SUITE_TOL) -> dict:
    """Run every exact check on one joint table.

    Gated checks (all must pass): projection algebra, the risk-gap identity for
    arbitrary predictors, the psi-norm identity for the Bayes predictor and its
    phi-measurable perturbations, fork independence I(y0;y1|q) = 0 and the
    pointwise decomposition residual.  The psi-norm identity on generic
    perturbations is recorded under ``informational`` and never gates.
    """
    bayes = bayes_predictor(table, "y0", x_set(table))
    generic = list(perturbed_predictors(table, rng, sweep))
    phi_meas = list(phi_measurable_perturbations(table, rng, sweep))

    alg = [projection_algebra(table, f, g) for f, g in zip(generic, generic[1:] + generic[:1])]
    alg_max = {k: max(a[k] for a in alg) for k in alg[0]} if alg else {}
    thm = [verify_risk_gap(f, table) for f in [bayes] + generic]
    cor_gated = [verify_psi_norm(f, table) for f in [bayes] + phi_meas]
    cor_generic = [verify_psi_norm(f, table) for f in generic]
    cmi_q, cmi_qyn = verify_collider_dependence(table)
    resid = decomposition_residual(table)

    checks = {
        "projection_algebra": bool(alg_max) and all(v <= tol for v in alg_max.values()),
        "risk_gap": all(r.identity_holds for r in thm),
        "psi_norm_bayes_and_phi_measurable": all(r.identity_holds for r in cor_gated),
        "fork_independence": cmi_q <= tol,
        "collider_dependence_nonnegative": cmi_qyn >= -tol,
        "decomposition_residual": resid <= tol,
    }
    return {
        "passed": all(checks.values()),
        "checks": checks,
        "projection_algebra_max_dev": alg_max,
        "risk_gap_max_gap": max(r.identity_gap for r in thm),
        "risk_gap_min_delta": min(r.delta for r in thm),
        "psi_norm_gated_max_gap": max(r.identity_gap for r in cor_gated),
        "cmi_given_q": cmi_q,
        "cmi_given_q_yn": cmi_qyn,
        "decomposition_residual": resid,
        "informational": {
            "psi_norm_generic_pass_fraction": sum(r.identity_holds for r in cor_generic) / max(len(cor_generic), 1),
            "psi_norm_generic_max_gap": max((r.identity_gap for r in cor_generic), default=0.0),
            "psi_norm_generic_max_abs_cross_term": max((abs(r.extra["cross_term"]) for r in cor_generic),
                                                         default=0.0),
        },
    }
