"""Scenario runner.

A scenario is a flat ``key = value`` file with a single ``[task]``
section.  Values are Python/TOML-style literals: quoted strings, numbers,
``true``/``false`` and lists.  Example::

    # Neumann parametrix of 1 + |xi|^2 on the flat torus
    [task]
    name = "parametrix-torus"
    type = "Parametrix"
    manifold = "FlatTorus"
    a = "1 + zeta1^2 + zeta2^2"
    a_order = 2
    b0 = "1/(1 + zeta1^2 + zeta2^2)"

``run`` writes ``<name>.csv`` and ``<name>.json`` into the output
directory and exits 0 iff every check passed.
"""
from __future__ import annotations

import argparse
import ast
import csv
import io
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sympy as sp

from .calculus import ExpansionConfig, adjoint_symbol, sharp_product
from .elliptic import ellipticity_test_scalar, neumann_parametrix
from .errors import NormalSymError, ParseError, ScenarioInvalid
from .geometry import (Circle, FlatTorus, Sphere2, curvature, gauss_lemma_defect,
                       generic_chart_from_json, stereographic_sphere_chart)
from .quantize import (FourierMesh, adjoint_quantize, default_mesh, exact_composition_symbol,
                       extract_symbol, quantize)
from .symbols import Covector, ExpressionSymbol, closed_form

__all__ = ["Scenario", "parse_scenario", "load_scenario", "run_scenario", "list_builtin_scenarios",
           "BUILTIN_SCENARIOS", "builtin_scenario", "main", "SCHEMA_VERSION", "TASKS"]

SCHEMA_VERSION = 1
TASKS = ("Quantize", "ExtractSymbol", "SharpCompare", "AdjointCompare", "Parametrix",
         "EllipticityTest", "GeometrySelfTest")
REQUIRED = {
    "Quantize": ("a", "a_order"),
    "ExtractSymbol": ("a", "a_order"),
    "SharpCompare": ("a", "a_order", "b", "b_order"),
    "AdjointCompare": ("a", "a_order"),
    "Parametrix": ("a", "a_order"),
    "EllipticityTest": ("a", "expect"),
    "GeometrySelfTest": (),
}
ROUNDOFF = 1e-11


# ----------------------------------------------------------------------------
# scenario files
# ----------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    task: str
    params: dict
    lines: dict = field(default_factory=dict)
    source: str = "<string>"

    def get(self, key, default=None):
        return self.params.get(key, default)

    def require(self, key):
        if key not in self.params:
            raise ScenarioInvalid(f"{self.source}: task {self.task} needs field '{key}'")
        return self.params[key]

    def invalid(self, key, msg):
        line = self.lines.get(key)
        where = f"{self.source}:{line}" if line else self.source
        return ScenarioInvalid(f"{where}: field '{key}': {msg}")


_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_.-]*$")


def _literal(text, line):
    t = re.sub(r"\btrue\b", "True", text)
    t = re.sub(r"\bfalse\b", "False", t)
    try:
        return ast.literal_eval(t)
    except (ValueError, SyntaxError):
        raise ParseError(f"cannot read value {text!r}", line=line) from None


def _strip_comment(s):
    out, quote = [], None
    for ch in s:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def parse_scenario(text, source="<string>"):
    params, lines = {}, {}
    sections = 0
    for n, raw in enumerate(text.splitlines(), start=1):
        s = _strip_comment(raw)
        if not s:
            continue
        if s.startswith("["):
            if s != "[task]":
                raise ParseError(f"unknown section {s!r} (only [task] is allowed)", line=n)
            sections += 1
            if sections > 1:
                raise ParseError("duplicate [task] section", line=n)
            continue
        if "=" not in s:
            raise ParseError(f"expected 'key = value', got {s!r}", line=n)
        key, _, val = s.partition("=")
        key = key.strip()
        if not _KEY.match(key):
            raise ParseError(f"bad key {key!r}", line=n)
        if key in params:
            raise ParseError(f"duplicate key {key!r}", line=n)
        params[key] = _literal(val.strip(), n)
        lines[key] = n
    if sections != 1:
        raise ScenarioInvalid(f"{source}: exactly one [task] section is required")
    task = params.get("type")
    if task not in TASKS:
        raise ScenarioInvalid(f"{source}:{lines.get('type', '?')}: field 'type': expected one of "
                              f"{', '.join(TASKS)}, got {task!r}")
    name = str(params.get("name", Path(source).stem if source != "<string>" else task))
    if not re.match(r"^[A-Za-z0-9_.-]+$", name):
        raise ScenarioInvalid(f"{source}:{lines.get('name', '?')}: field 'name': {name!r} is not "
                              "a safe file name")
    sc = Scenario(name, task, params, lines, source)
    for key in REQUIRED[task]:
        sc.require(key)
    for key in ("a", "b", "b0", "witness", "expected_adjoint"):
        if key in params:
            _symbol(sc, key, 0, _manifold(sc))          # referenced symbols must parse
    return sc


def load_scenario(path):
    p = Path(path)
    return parse_scenario(p.read_text(), str(p))


def _manifold(sc):
    kind = sc.get("manifold", "Circle")
    radius = float(sc.get("radius", 1.0))
    if kind == "Circle":
        return Circle(radius)
    if kind == "FlatTorus":
        per = sc.get("periods", [2 * math.pi, 2 * math.pi])
        return FlatTorus(tuple(float(v) for v in per))
    if kind == "Sphere2":
        return Sphere2(radius)
    if kind == "StereographicSphere":
        return stereographic_sphere_chart(radius)
    if kind == "GenericChart":
        spec = {"dim": sc.require("dim"), "metric": sc.require("metric"),
                "bounds": sc.get("bounds", [[-1, 1]] * int(sc.get("dim"))),
                "injectivity_radius": sc.get("injectivity_radius", 1.0)}
        return generic_chart_from_json(spec)
    raise sc.invalid("manifold", f"unknown manifold {kind!r}")


def _symbol(sc, key, order, M):
    expr = sc.require(key)
    try:
        return closed_form(expr, M.dim, float(order), manifold=M)
    except ParseError as exc:
        raise ParseError(f"{sc.source}: field '{key}': {exc}", line=sc.lines.get(key)) from None


# ----------------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------------

@dataclass
class Outcome:
    header: list
    rows: list
    checks: dict
    summary: dict

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks.values())


def _check(value, threshold, op="<="):
    v = float(value)
    ok = {"<=": v <= threshold, ">=": v >= threshold, "==": v == threshold}[op]
    return {"value": _jnum(v), "threshold": threshold, "op": op, "passed": bool(ok)}


def _jnum(v):
    if isinstance(v, (float, np.floating)) and math.isinf(v):
        return "-inf" if v < 0 else "inf"
    if isinstance(v, np.generic):
        return v.item()
    return v


def _chart_points(M, n, rng):
    return M.chart_coords(M.sample_points(n, rng))


def _shell_samples(M, pts, radii, rng):
    """Chart points x (n, d) paired with every radius along a random
    direction per point: returns X, Z of shape (radii, n, d)."""
    d = M.dim
    u = rng.normal(size=(len(pts), d))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    X = np.broadcast_to(pts[None], (len(radii),) + pts.shape)
    Z = radii[:, None, None] * u[None]
    return X, Z


def _fit_slope(radii, errs, floors):
    """Log-log slope over the samples above the round-off floor; -inf when
    every sample is at the floor."""
    keep = errs > floors
    if keep.sum() < 2:
        return -math.inf
    return float(np.polyfit(np.log(radii[keep]), np.log(errs[keep]), 1)[0])


def _lattice(M, kmax):
    if M.dim == 1:
        ks = [(k,) for k in range(-kmax, kmax + 1)]
    else:
        ks = [(i, j) for i in range(-kmax, kmax + 1) for j in range(-kmax, kmax + 1)
              if i * i + j * j <= kmax * kmax]
    periods = np.atleast_1d(M.periods) if M.dim > 1 else np.array([2 * math.pi * M.radius])
    return np.array(ks), 2 * math.pi / periods


def _plane(mesh, freq):
    return np.exp(1j * mesh.chart @ freq)


# ----------------------------------------------------------------------------
# tasks
# ----------------------------------------------------------------------------

def _task_geometry(sc, M, rng):
    n = int(sc.get("n_pairs", 100))
    closed = bool(getattr(M, "closed_form", True))
    tol = float(sc.get("tol", 1e-8 if closed else 1e-6))
    scale = float(sc.get("scale", 0.8 if closed else 0.1))
    gauss, roundtrip = gauss_lemma_defect(M, n, rng, scale)
    checks = {"gauss_lemma_max_err": _check(gauss, tol),
              "roundtrip_max_err": _check(roundtrip, tol)}
    rows = [["gauss_lemma", "max_abs", repr(gauss)], ["roundtrip", "max_abs", repr(roundtrip)]]
    summary = {"gauss_lemma_max_err": gauss, "roundtrip_max_err": roundtrip, "pairs": n}
    if sc.get("rho_expansion", False):
        if not isinstance(M, Sphere2):
            raise sc.invalid("rho_expansion", "only available on Sphere2")
        p = M.sample_points(1, rng)
        u = rng.normal(size=2)
        u /= np.linalg.norm(u)
        r = np.geomspace(1e-3, 1e-1, 21)
        z = r[:, None] * u[None]
        P = np.broadcast_to(p, (len(r), 3))
        y = M.exp(P, M.vector(P, z))
        rho = M.rho(P, y)
        ric = curvature(M, p).ricci.reshape(2, 2)
        defect = np.abs(rho - 1 + np.einsum("nk,kl,nl->n", z, ric, z) / 6)
        slope = float(np.polyfit(np.log(r), np.log(defect), 1)[0])
        ang = np.arccos(np.clip(np.sum(P * y, -1) / M.radius ** 2, -1, 1))
        oracle = np.sin(ang) / ang
        oerr = float(np.max(np.abs(rho - oracle)))
        checks["rho_expansion_slope"] = _check(slope, 2.7, ">=")
        checks["rho_oracle_max_err"] = _check(oerr, 1e-10)
        rows += [["rho_defect", repr(float(ri)), repr(float(di))] for ri, di in zip(r, defect)]
        summary.update(rho_expansion_slope=slope, rho_oracle_max_err=oerr)
    return Outcome(["quantity", "parameter", "value"], rows, checks, summary)


def _task_sharp(sc, M, rng):
    a = _symbol(sc, "a", sc.require("a_order"), M)
    b = _symbol(sc, "b", sc.require("b_order"), M)
    N = int(sc.get("truncation", 2))
    cfg = ExpansionConfig(max_order_drop=N, r_coefficient=float(sc.get("r_coefficient", -1 / 3)))
    lo, hi = sc.get("shell", [4.0, 16.0])
    radii = np.geomspace(float(lo), float(hi), int(sc.get("n_radii", 7)))
    pts = _chart_points(M, int(sc.get("n_points", 6)), rng)
    X, Z = _shell_samples(M, pts, radii, rng)
    xi = Covector(M, X, Z)
    oracle = exact_composition_symbol(a, b, xi)
    exp = sharp_product(a, b, cfg).evaluate(X, Z)
    errs = np.abs(np.reshape(exp, oracle.shape) - oracle).reshape(len(radii), -1).max(axis=1)
    mu = a.order + b.order
    floors = ROUNDOFF * (1 + radii) ** mu
    rows, checks, summary = [], {}, {"samples": int(X.shape[0] * X.shape[1])}
    header = ["norm_xi", "err", "err_without_r_term"]
    if M.flat:
        # relative to the size (1+|xi|)^(mu+mu') of the product
        rel = errs / (1 + radii) ** mu
        tol = float(sc.get("tol", 1e-10))
        checks["max_rel_err"] = _check(rel.max(), tol)
        rows = [[repr(float(r)), repr(float(e)), ""] for r, e in zip(radii, errs)]
        summary.update(max_err=float(errs.max()), max_rel_err=float(rel.max()))
    else:
        cfg0 = ExpansionConfig(max_order_drop=N, r_coefficient=0.0)
        e0 = np.abs(np.reshape(sharp_product(a, b, cfg0).evaluate(X, Z), oracle.shape)
                    - oracle).reshape(len(radii), -1).max(axis=1)
        slope = _fit_slope(radii, errs, floors)
        bound = mu - 3 + 0.5
        ratio = float(e0[-1] / max(errs[-1], floors[-1]))
        checks["fitted_slope"] = _check(slope, bound)
        checks["r_term_ratio"] = _check(ratio, 2.0, ">=")
        rows = [[repr(float(r)), repr(float(e)), repr(float(f))] for r, e, f in zip(radii, errs, e0)]
        summary.update(fitted_slope=slope, slope_bound=bound, r_term_ratio=ratio,
                       exact_to_roundoff=bool(np.all(errs <= floors)))
    return Outcome(header, rows, checks, summary)


def _band_limited(mesh, M, band, rng):
    ks, step = _lattice(M, band)
    c = rng.normal(size=len(ks)) + 1j * rng.normal(size=len(ks))
    return np.exp(1j * mesh.chart @ (ks * step).T) @ c


def _task_adjoint(sc, M, rng):
    a = _symbol(sc, "a", sc.require("a_order"), M)
    rows, checks, summary = [], {}, {}
    if isinstance(M, (Circle, FlatTorus)):
        mesh = default_mesh(M, **({"n": int(sc.get("mesh"))} if sc.get("mesh") else {}))
        A, As = quantize(a, mesh), adjoint_quantize(a, mesh)
        worst = 0.0
        for t in range(int(sc.get("n_trials", 3))):
            f = _band_limited(mesh, M, int(sc.get("band", 8)), rng)
            g = _band_limited(mesh, M, int(sc.get("band", 8)), rng)
            lhs = mesh.inner(A.apply(f), g)
            rhs = mesh.inner(f, As.apply(g))
            scale = math.sqrt(abs(mesh.inner(f, f)) * abs(mesh.inner(g, g)))
            dfc = float(abs(lhs - rhs) / scale)
            worst = max(worst, dfc)
            rows.append([str(t), repr(float(abs(lhs))), repr(dfc)])
        checks["pairing_defect"] = _check(worst, float(sc.get("tol", 1e-8)))
        summary["pairing_defect"] = worst
    if "expected_adjoint" in sc.params:
        star = adjoint_symbol(a, ExpansionConfig(max_order_drop=int(sc.get("truncation", 2))))
        want = _symbol(sc, "expected_adjoint", a.order, M)
        if isinstance(star, ExpressionSymbol):
            zero = all(sp.simplify(e) == 0 for e in star.matrix - want.matrix)
            diff = 0.0 if zero else math.inf
        else:
            pts = _chart_points(M, 8, rng)
            X, Z = _shell_samples(M, pts, np.geomspace(1, 100, 5), rng)
            diff = float(np.max(np.abs(star.evaluate(X, Z) - want.evaluate(X, Z))))
        checks["adjoint_symbol_err"] = _check(diff, float(sc.get("symbol_tol", 1e-12)))
        summary["adjoint_symbol_err"] = diff
    if not checks:
        raise ScenarioInvalid(f"{sc.source}: AdjointCompare on {M.kind} needs 'expected_adjoint'")
    return Outcome(["trial", "abs_pairing", "relative_defect"], rows, checks, summary)


def _task_quantize(sc, M, rng):
    if not isinstance(M, (Circle, FlatTorus)):
        raise sc.invalid("manifold", "Quantize eigenvalue checks run on Circle or FlatTorus")
    a = _symbol(sc, "a", sc.require("a_order"), M)
    mesh = FourierMesh(M, int(sc.params["mesh"])) if sc.get("mesh") else default_mesh(M)
    A = quantize(a, mesh)
    ks, step = _lattice(M, int(sc.get("kmax", 32)))
    x = mesh.chart
    rows, worst = [], 0.0
    for k in ks:
        freq = k * step
        e = _plane(mesh, freq)
        got = A.apply(e)
        want = np.reshape(a.evaluate(x, np.broadcast_to(freq, x.shape)), got.shape) * e
        err = float(np.max(np.abs(got - want)) / max(1.0, float(np.max(np.abs(want)))))
        lam = complex(np.vdot(e, got) / np.vdot(e, e))
        worst = max(worst, err)
        rows.append([" ".join(str(int(v)) for v in k), repr(lam.real), repr(lam.imag), repr(err)])
    checks = {"eigen_rel_err": _check(worst, float(sc.get("tol", 1e-8)))}
    return Outcome(["k", "eigen_re", "eigen_im", "rel_err"], rows, checks,
                   {"eigen_rel_err": worst, "modes": len(ks)})


def _task_extract(sc, M, rng):
    a = _symbol(sc, "a", sc.require("a_order"), M)
    mesh = default_mesh(M)
    A = quantize(a, mesh)
    lo, hi = sc.get("shell", [2.0, mesh.nyquist / 4])
    radii = np.geomspace(float(lo), float(hi), int(sc.get("n_radii", 6)))
    pts = _chart_points(M, int(sc.get("n_points", 3)), rng)
    X, Z = _shell_samples(M, pts, radii, rng)
    sig = extract_symbol(A, Covector(M, X, Z))
    ref = np.reshape(a.evaluate(X, Z), sig.shape)
    err = (np.abs(sig - ref) / (1 + radii[:, None]) ** a.order).reshape(len(radii), -1).max(axis=1)
    rows = [[repr(float(r)), repr(float(e))] for r, e in zip(radii, err)]
    checks = {"normalized_err": _check(err.max(), float(sc.get("tol", 1e-4)))}
    return Outcome(["norm_xi", "normalized_err"], rows, checks, {"normalized_err": float(err.max())})


def _task_parametrix(sc, M, rng):
    a = _symbol(sc, "a", sc.require("a_order"), M)
    if "b0" in sc.params:
        b0 = _symbol(sc, "b0", -a.order, M)
    else:
        b0 = closed_form(f"1/({sc.require('a')})", M.dim, -a.order, manifold=M)
    res = neumann_parametrix(a, b0, ExpansionConfig(max_order_drop=int(sc.get("truncation", 2))),
                             max_terms=int(sc.get("max_terms", 8)),
                             tol_order=float(sc.get("tol_order", -6.0)), raise_on_failure=False)
    resid = max(res.residual_sup.values())
    checks = {"converged": _check(float(res.converged), 1.0, "==")}
    if "expect_terms" in sc.params:
        checks["terms_used"] = _check(res.terms_used, int(sc.params["expect_terms"]), "<=")
    if "expect_residual" in sc.params:
        checks["residual"] = _check(resid, float(sc.params["expect_residual"]))
    rows = [[str(h["terms"]), repr(float(h["right"])), repr(float(h["left"])),
             repr(float(h["right_sup"])), repr(float(h["left_sup"]))] for h in res.history]
    summary = {"terms_used": res.terms_used, "residual": resid,
               "residual_orders": {k: _jnum(float(v)) for k, v in res.residual_orders.items()}}
    return Outcome(["terms", "right_order", "left_order", "right_sup", "left_sup"], rows, checks,
                   summary)


def _task_ellipticity(sc, M, rng):
    m = sc.get("m")
    a = _symbol(sc, "a", sc.get("a_order", m if m is not None else 0.0), M)
    w = _symbol(sc, "witness", -(m or 0.0), M) if "witness" in sc.params else None
    rep = ellipticity_test_scalar(a, m, witness=w)
    expect = sc.require("expect")
    checks = {"verdict": {"value": str(rep.verdict), "threshold": expect, "op": "==",
                          "passed": rep.verdict.kind == expect or str(rep.verdict) == expect}}
    if rep.verdict.kind == "NotElliptic":
        checks["ray_recorded"] = _check(float(bool(rep.failure_locus)), 1.0, "==")
    rows = [["constant", k, repr(v)] for k, v in sorted(rep.constants.items())]
    for loc in rep.failure_locus:
        rows.append(["failure", json.dumps(loc.get("x")), json.dumps(loc.get("direction",
                                                                            loc.get("zeta")))])
    return Outcome(["kind", "key", "value"], rows, checks, rep.to_dict())


_RUNNERS = {"GeometrySelfTest": _task_geometry, "SharpCompare": _task_sharp,
            "AdjointCompare": _task_adjoint, "Quantize": _task_quantize,
            "ExtractSymbol": _task_extract, "Parametrix": _task_parametrix,
            "EllipticityTest": _task_ellipticity}


def _csv_text(outcome):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(outcome.header)
    w.writerows(outcome.rows)
    return buf.getvalue()


def run_scenario(sc, seed=None, out=None):
    """Runs a Scenario; returns the JSON summary dict (also written to
    ``out`` together with the CSV table when ``out`` is given)."""
    seed = int(sc.get("seed", 0) if seed is None else seed)
    rng = np.random.default_rng(seed)
    M = _manifold(sc)
    outcome = _RUNNERS[sc.task](sc, M, rng)
    report = {"schema_version": SCHEMA_VERSION, "scenario": sc.name, "task": sc.task,
              "manifold": M.kind, "seed": seed,
              "checks": outcome.checks,
              "summary": {k: _jnum(v) for k, v in outcome.summary.items()},
              "passed": outcome.passed}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{sc.name}.csv").write_text(_csv_text(outcome))
        (out / f"{sc.name}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    report["csv"] = _csv_text(outcome)
    return report


# ----------------------------------------------------------------------------
# built-in catalog
# ----------------------------------------------------------------------------

BUILTIN_SCENARIOS = {
    "geometry-sphere": ("Gauss lemma and exp/log round trip on the round sphere", """
[task]
type = "GeometrySelfTest"
manifold = "Sphere2"
"""),
    "sphere-rho-expansion": ("density rho against 1 - Ric(z,z)/6 and sin(r)/r on Sphere2", """
[task]
type = "GeometrySelfTest"
manifold = "Sphere2"
n_pairs = 20
rho_expansion = true
"""),
    "flat-sharp-vs-classical": ("# on the flat torus against the exact operator composition", """
[task]
type = "SharpCompare"
manifold = "FlatTorus"
a = "sin(x1)*zeta1^2 + cos(x2)*zeta2 + 1"
a_order = 2
b = "cos(x1 - x2)*zeta1*zeta2 + sin(x2)*zeta1 + x1"
b_order = 2
shell = [1.0, 100.0]
"""),
    "sphere-sharp-curvature": ("second-order # with curvature term on Sphere2, zeta1 # zeta2^2", """
[task]
type = "SharpCompare"
manifold = "Sphere2"
a = "zeta1"
a_order = 1
b = "zeta2^2"
b_order = 2
shell = [4.0, 16.0]
"""),
    "adjoint-pairing-circle": ("<Op(a)f, g> = <f, Op*(a)g> on the circle", """
[task]
type = "AdjointCompare"
manifold = "Circle"
a = "cos(x1)*zeta1^2 + sin(x1)*zeta1 + 1"
a_order = 2
"""),
    "adjoint-symbol-torus": ("adjoint symbol of sin(x1) zeta1 at N = 2 on the torus", """
[task]
type = "AdjointCompare"
manifold = "FlatTorus"
a = "sin(x1)*zeta1"
a_order = 1
expected_adjoint = "sin(x1)*zeta1 - i*cos(x1)"
"""),
    "quantize-circle-laplacian": ("Op(|xi|^2) eigenvalues k^2 on the circle for |k| <= 32", """
[task]
type = "Quantize"
manifold = "Circle"
a = "zeta1^2"
a_order = 2
kmax = 32
"""),
    "extract-circle": ("extract_symbol(quantize(zeta)) on the circle", """
[task]
type = "ExtractSymbol"
manifold = "Circle"
a = "zeta1"
a_order = 1
"""),
    "parametrix-torus": ("Neumann parametrix of 1 + |xi|^2 on the flat torus", """
[task]
type = "Parametrix"
manifold = "FlatTorus"
a = "1 + zeta1^2 + zeta2^2"
a_order = 2
b0 = "1/(1 + zeta1^2 + zeta2^2)"
expect_terms = 1
expect_residual = 0.0
"""),
    "parametrix-sphere": ("Neumann parametrix of 1 + |xi|^2 on Sphere2 to order -4", """
[task]
type = "Parametrix"
manifold = "Sphere2"
a = "1 + zeta1^2 + zeta2^2"
a_order = 2
tol_order = -4
max_terms = 4
"""),
    "ellipticity-zeta1": ("zeta1 on the torus is rejected with a vanishing ray", """
[task]
type = "EllipticityTest"
manifold = "FlatTorus"
a = "zeta1"
m = 1
expect = "NotElliptic"
"""),
    "ellipticity-laplacian": ("|xi|^2 is elliptic of order 2", """
[task]
type = "EllipticityTest"
manifold = "FlatTorus"
a = "zeta1^2 + zeta2^2"
m = 2
expect = "EllipticOfOrder"
"""),
}


def list_builtin_scenarios():
    """{name: one-line description}."""
    return {k: v[0] for k, v in BUILTIN_SCENARIOS.items()}


def builtin_scenario(name):
    if name not in BUILTIN_SCENARIOS:
        raise ScenarioInvalid(f"no built-in scenario {name!r}")
    text = BUILTIN_SCENARIOS[name][1]
    return parse_scenario(f'name = "{name}"\n' + text, f"builtin:{name}")


# ----------------------------------------------------------------------------
# command line
# ----------------------------------------------------------------------------

def _status_line(rep):
    flag = "PASS" if rep["passed"] else "FAIL"
    return f"{flag} {rep['scenario']} ({rep['task']})"


def main(argv=None):
    ap = argparse.ArgumentParser(prog="normalsym", description="normal symbol calculus scenarios")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario file (or builtin:<name>)")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default="results")
    sub.add_parser("list", help="list built-in scenarios")
    s = sub.add_parser("selftest", help="run every built-in scenario")
    s.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    if args.command == "list":
        for name, desc in list_builtin_scenarios().items():
            print(f"{name:28s} {desc}")
        return 0
    try:
        if args.command == "run":
            if args.scenario.startswith("builtin:"):
                sc = builtin_scenario(args.scenario.split(":", 1)[1])
            else:
                sc = load_scenario(args.scenario)
            rep = run_scenario(sc, args.seed, args.out)
            print(_status_line(rep))
            return 0 if rep["passed"] else 1
        ok = True
        for name in BUILTIN_SCENARIOS:
            rep = run_scenario(builtin_scenario(name), None, args.out)
            print(_status_line(rep))
            ok &= rep["passed"]
        return 0 if ok else 1
    except (ParseError, ScenarioInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NormalSymError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
