"""Locally periodic coefficients and divergence-free source fields.

The material model is a pair of scalar fields on Omega x Y: a real
magnetic coefficient mu_inv(x, y) and a complex electric coefficient
kappa(x, y), both periodic in the fast variable y with unit cell
Y = [-1/2, 1/2)^3 and uniformly bounded,

    c0 <= mu_inv <= c1,  c0 <= Re kappa <= c1,  c0 <= -Im kappa <= c1.

Presets are analytic closures so that homogenized limits stay available
in closed form.  The piecewise constant sampling used by the multiscale
method evaluates both fields at macro and micro tet barycenters.
"""

from dataclasses import dataclass, field

import numpy as np

from .mesh import MacroMesh, PeriodicMicroMesh

TWO_PI = 2.0 * np.pi
PROBE_AXIS = 5
PERIODICITY_TOL = 1e-14
BOUNDS_TOL = 1e-12


class PresetError(ValueError):
    """Unknown preset name or parameters violating the bound model."""


@dataclass(frozen=True)
class CoefficientField:
    """Scalar coefficient pair with declared uniform bounds.

    mu_inv and kappa are vectorized callables f(x, y) taking arrays of
    shape (..., 3) broadcastable against each other and returning the
    broadcast leading shape.  x_independent marks fields that ignore x,
    which lets downstream samplers and cell solvers reuse one micro
    solve for every macro element.
    """

    mu_inv: object
    kappa: object
    c0: float
    c1: float
    preset: str
    params: dict = field(default_factory=dict)
    x_independent: bool = False

    def validate(self, box_lo=(0.0, 0.0, 0.0), box_hi=(1.0, 1.0, 1.0)):
        """Check bounds and y-periodicity on a probe grid; raise on failure."""
        probe_field(self, box_lo, box_hi)
        return self


def _probe_grid(lo, hi):
    axes = [np.linspace(lo[d], hi[d], PROBE_AXIS) for d in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return pts.reshape(-1, 3)


def probe_field(coeffs: CoefficientField, box_lo=(0.0, 0.0, 0.0),
                box_hi=(1.0, 1.0, 1.0)):
    """Evaluate both coefficients on a probe grid and enforce the model.

    Probes the full product of a PROBE_AXIS^3 grid in x over the given
    box with a PROBE_AXIS^3 grid in y over the unit cell.  Returns the
    probed (mu, kappa) arrays for reuse by tests.
    """
    x = _probe_grid(box_lo, box_hi)
    y = _probe_grid((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    xx = x[:, None, :]
    yy = y[None, :, :]
    mu = np.asarray(coeffs.mu_inv(xx, yy), dtype=float)
    ka = np.asarray(coeffs.kappa(xx, yy), dtype=complex)
    lo, hi = coeffs.c0 - BOUNDS_TOL, coeffs.c1 + BOUNDS_TOL
    parts = ((mu, "mu_inv"), (ka.real, "Re kappa"), (-ka.imag, "-Im kappa"))
    for vals, tag in parts:
        if vals.min() < lo or vals.max() > hi:
            raise PresetError(
                f"{coeffs.preset}: {tag} range [{vals.min():.6g}, "
                f"{vals.max():.6g}] leaves declared bounds "
                f"[{coeffs.c0:.6g}, {coeffs.c1:.6g}]"
            )
    for d in range(3):
        shift = yy + np.eye(3)[d]
        dmu = np.abs(np.asarray(coeffs.mu_inv(xx, shift)) - mu).max()
        dka = np.abs(np.asarray(coeffs.kappa(xx, shift)) - ka).max()
        if max(dmu, dka) > PERIODICITY_TOL:
            raise PresetError(
                f"{coeffs.preset}: not periodic in y_{d} "
                f"(deviation {max(dmu, dka):.3g})"
            )
    return mu, ka


def _lead_shape(x, y):
    return np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)[:-1])


def _expand(values, shape):
    out = np.empty(shape, dtype=np.asarray(values).dtype)
    out[...] = values
    return out


def _require(cond, message):
    if not cond:
        raise PresetError(message)


def preset(name, params=None):
    """Build a named coefficient preset.

    Presets:
      constant(m0, k0): mu_inv = m0 and kappa = k0 everywhere.
      laminate_y1(a, b): mu_inv = a + b sin(2 pi y_1) and
        kappa = (a + b sin(2 pi y_1)) (1 - i).
      separable_xy(a, b, gamma): the laminate modulated by (1 + gamma x_1).

    The common (1 - i) factor keeps Re kappa = -Im kappa so the declared
    bounds and the homogenized limits stay closed form.
    """
    params = dict(params or {})
    if name == "constant":
        m0 = float(params.pop("m0", 1.0))
        k0 = complex(params.pop("k0", 1.0 - 1.0j))
        _require(not params, f"constant: unknown parameters {sorted(params)}")
        _require(m0 > 0, f"constant: m0 must be positive, got {m0}")
        _require(k0.real > 0 and -k0.imag > 0,
                 f"constant: need Re k0 > 0 and -Im k0 > 0, got {k0}")
        vals = (m0, k0.real, -k0.imag)

        def mu_inv(x, y):
            return _expand(m0, _lead_shape(x, y))

        def kappa(x, y):
            return _expand(k0, _lead_shape(x, y))

        return CoefficientField(
            mu_inv, kappa, min(vals), max(vals), "constant",
            {"m0": m0, "k0": k0}, x_independent=True,
        )

    if name == "laminate_y1":
        a = float(params.pop("a", 2.0))
        b = float(params.pop("b", 1.0))
        _require(not params,
                 f"laminate_y1: unknown parameters {sorted(params)}")
        _require(a - abs(b) > 0,
                 f"laminate_y1: need a > |b| for positive bounds, "
                 f"got a={a}, b={b}")

        def profile(y):
            return a + b * np.sin(TWO_PI * np.asarray(y)[..., 0])

        def mu_inv(x, y):
            return _expand(profile(y), _lead_shape(x, y))

        def kappa(x, y):
            return _expand(profile(y) * (1.0 - 1.0j), _lead_shape(x, y))

        return CoefficientField(
            mu_inv, kappa, a - abs(b), a + abs(b), "laminate_y1",
            {"a": a, "b": b}, x_independent=True,
        )

    if name == "separable_xy":
        a = float(params.pop("a", 2.0))
        b = float(params.pop("b", 1.0))
        gamma = float(params.pop("gamma", 0.5))
        _require(not params,
                 f"separable_xy: unknown parameters {sorted(params)}")
        _require(a - abs(b) > 0,
                 f"separable_xy: need a > |b|, got a={a}, b={b}")
        # modulation 1 + gamma x_1 must stay positive on the unit box
        _require(1.0 + min(0.0, gamma) > 0,
                 f"separable_xy: modulation sign change, gamma={gamma}")
        fac_lo = min(1.0, 1.0 + gamma)
        fac_hi = max(1.0, 1.0 + gamma)

        def modulation(x):
            return 1.0 + gamma * np.asarray(x)[..., 0]

        def profile(y):
            return a + b * np.sin(TWO_PI * np.asarray(y)[..., 0])

        def mu_inv(x, y):
            return _expand(modulation(x) * profile(y), _lead_shape(x, y))

        def kappa(x, y):
            return _expand(
                modulation(x) * profile(y) * (1.0 - 1.0j), _lead_shape(x, y)
            )

        return CoefficientField(
            mu_inv, kappa, (a - abs(b)) * fac_lo, (a + abs(b)) * fac_hi,
            "separable_xy", {"a": a, "b": b, "gamma": gamma},
            x_independent=False,
        )

    raise PresetError(f"unknown coefficient preset {name!r}")


@dataclass(frozen=True)
class SampledCoefficients:
    """Barycenter samples mu_inv(x_j, y_i) and kappa(x_j, y_i).

    Arrays have shape (num macro tets, num micro tets).  For
    x-independent fields they are stride-0 broadcast views over a single
    row, so storage stays O(num micro tets).  Rows index macro tets.
    """

    mu_inv: np.ndarray
    kappa: np.ndarray
    x_independent: bool

    @property
    def num_macro(self):
        return self.mu_inv.shape[0]

    @property
    def num_micro(self):
        return self.mu_inv.shape[1]


def sample(coeffs: CoefficientField, macro: MacroMesh,
           micro: PeriodicMicroMesh) -> SampledCoefficients:
    """Sample both coefficients at macro x micro tet barycenters."""
    yb = micro.tet_barycenters
    num_macro = macro.num_tets
    xb = macro.tet_barycenters
    if coeffs.x_independent:
        xb = xb[:1]
    mu = np.asarray(coeffs.mu_inv(xb[:, None, :], yb[None, :, :]), dtype=float)
    ka = np.asarray(coeffs.kappa(xb[:, None, :], yb[None, :, :]),
                    dtype=complex)
    shape = (num_macro, micro.num_tets)
    mu = np.broadcast_to(mu, shape)
    ka = np.broadcast_to(ka, shape)
    if mu.base is not None and mu.flags.writeable:
        mu.flags.writeable = False
    if ka.base is not None and ka.flags.writeable:
        ka.flags.writeable = False
    return SampledCoefficients(mu, ka, coeffs.x_independent)


@dataclass(frozen=True)
class SourceField:
    """Divergence-free time-harmonic current source.

    evaluate is a vectorized callable f(x) mapping (..., 3) points to
    (..., 3) complex values.  All presets are analytically
    divergence-free, recorded by the flag.
    """

    evaluate: object
    preset: str
    params: dict = field(default_factory=dict)
    divergence_free: bool = True


def source_preset(name, params=None):
    """Build a named source preset.

    Presets:
      constant(value): the fixed vector value (3 complex components).
      mms_sine(amplitude): amplitude sin(pi x_2) sin(pi x_3) e_1, the
        load shape whose tangential trace vanishes on the unit box.
    """
    params = dict(params or {})
    if name == "constant":
        value = np.asarray(params.pop("value", (1.0, 0.0, 0.0)),
                           dtype=complex)
        _require(not params, f"constant: unknown parameters {sorted(params)}")
        if value.shape != (3,):
            raise PresetError(
                f"constant source needs a 3-vector, got shape {value.shape}"
            )

        def evaluate(x):
            x = np.asarray(x, dtype=float)
            out = np.empty(x.shape, dtype=complex)
            out[...] = value
            return out

        return SourceField(evaluate, "constant", {"value": value.copy()})

    if name == "mms_sine":
        amplitude = complex(params.pop("amplitude", 1.0))
        _require(not params, f"mms_sine: unknown parameters {sorted(params)}")

        def evaluate(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape, dtype=complex)
            out[..., 0] = amplitude * np.sin(np.pi * x[..., 1]) * np.sin(
                np.pi * x[..., 2]
            )
            return out

        return SourceField(evaluate, "mms_sine", {"amplitude": amplitude})

    raise PresetError(f"unknown source preset {name!r}")
