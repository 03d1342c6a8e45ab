"""Error-budget verification, Lipschitz estimates, convergence fits and alignment metrics."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.spatial.distance import cdist

from .domains import EncoderHandle, IdentityDecoder, ToyWorld, encode, sample_pair
from .fields import PerturbedField, as_field
from .sampler import SamplerConfig, reverse_ode

SLACK = 1.10


class UnmeasurableTermError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


# -- Lipschitz estimation -----------------------------------------------------


def jacobians(field, t, z, zT, radius=1e-4, wrt="state"):
    """Central-difference Jacobians of the velocity at a batch of points, shape (n, d, d).

    ``wrt="endpoint"`` differentiates with respect to the pinned endpoint instead.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    zT = np.broadcast_to(np.asarray(zT, dtype=float), z.shape)
    n, d = z.shape
    jac = np.empty((n, d, d))
    for k in range(d):
        h = np.zeros(d)
        h[k] = radius
        if wrt == "state":
            up = field.evaluate(t, z + h, zT).velocity
            down = field.evaluate(t, z - h, zT).velocity
        else:
            up = field.evaluate(t, z, zT + h).velocity
            down = field.evaluate(t, z, zT - h).velocity
        jac[:, :, k] = (np.atleast_2d(up) - np.atleast_2d(down)) / (2 * radius)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError(f"non-finite field probe at t={t}")
    return jac


def spectral_norms(jac):
    return np.linalg.norm(jac, ord=2, axis=(-2, -1))


@dataclass
class LipschitzEstimate:
    times: np.ndarray             # decreasing, as in the sampler grid
    state: np.ndarray             # max ||dv/dz|| over probes per time
    endpoint: np.ndarray          # max ||dv/dzT|| over probes per time
    second_derivative: float = 0.0  # B-hat

    @property
    def combined(self):
        return self.state + self.endpoint

    def cumulative(self, which="combined"):
        """``int_{t_lo}^{t} L ds`` at every grid time (trapezoid, zero at the bottom)."""
        vals = self.combined if which == "combined" else self.state
        t, v = self.times[::-1], vals[::-1]
        cum = integrate.cumulative_trapezoid(v, t, initial=0.0)
        return cum[::-1]

    def integral(self, which="combined") -> float:
        return float(self.cumulative(which)[0])


def estimate_lipschitz(field, probes, zT, times, radius=1e-4, endpoint=True, reference=None):
    """Max Jacobian spectral norms over probe states at every time.

    ``probes`` has shape (len(times), n, d): the probe states at each time.
    ``reference`` (k, n, d) on a uniform grid of spacing ``h`` gives B-hat by
    second differences; pass it as ``(states, h)``.
    """
    field = as_field(field)
    times = np.asarray(times, dtype=float)
    probes = np.asarray(probes, dtype=float)
    state = np.empty(len(times))
    end = np.zeros(len(times))
    for k, t in enumerate(times):
        state[k] = spectral_norms(jacobians(field, t, probes[k], zT, radius)).max()
        if endpoint:
            end[k] = spectral_norms(jacobians(field, t, probes[k], zT, radius, wrt="endpoint")).max()
    b_hat = 0.0
    if reference is not None:
        b_hat = float(second_derivative_bound(*reference).max())
    return LipschitzEstimate(times, state, end, b_hat)


def second_derivative_bound(states, h):
    """Per-trajectory max of ``||z_{k+1} - 2 z_k + z_{k-1}|| / h^2``; states (k, n, d)."""
    s = np.asarray(states, dtype=float)
    if s.ndim == 2:
        s = s[:, None, :]
    dd = (s[2:] - 2 * s[1:-1] + s[:-2]) / (h * h)
    return np.linalg.norm(dd, axis=-1).max(axis=0)


# -- bound constants ----------------------------------------------------------


def gronwall_weights(lip: LipschitzEstimate, decoder_lipschitz=1.0):
    """``W(t) = L_D exp(int_{t_lo}^t L)`` on the grid (decreasing times)."""
    return decoder_lipschitz * np.exp(lip.cumulative("combined"))


def weight_energy(lip: LipschitzEstimate, decoder_lipschitz=1.0) -> float:
    w = gronwall_weights(lip, decoder_lipschitz)
    return float(integrate.trapezoid(w[::-1] ** 2, lip.times[::-1]))


def discretization_constant(lip_state, tau, b_hat):
    """``C = (B/2) sum_i exp(sum_{j > i} tau L(t_j))`` with ``t_0`` the top of the grid.

    ``lip_state`` holds ``L(t_j)`` for the N step-start times ``t_0 .. t_{N-1}``.
    """
    L = np.asarray(lip_state, dtype=float)
    tail = np.concatenate([np.cumsum((tau * L)[::-1])[::-1][1:], [0.0]])
    return 0.5 * b_hat * float(np.sum(np.exp(tail)))


# -- error budget -------------------------------------------------------------


@dataclass
class ErrorBudget:
    encoder_term: float
    field_term: float
    disc_term: float
    decoder_term: float
    measured_total: float
    delta: float
    field_term_deterministic: float = 0.0

    def __post_init__(self):
        for name in ("encoder_term", "field_term", "disc_term", "decoder_term", "field_term_deterministic"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def bound(self) -> float:
        return self.encoder_term + self.field_term + self.disc_term + self.decoder_term

    @property
    def bound_holds(self) -> bool:
        return bool(self.measured_total <= self.bound)

    @property
    def holds_with_slack(self) -> bool:
        return bool(self.measured_total <= SLACK * self.bound)

    def as_row(self):
        return [self.encoder_term, self.field_term, self.field_term_deterministic, self.disc_term,
                self.decoder_term, self.bound, self.measured_total, self.bound_holds, self.holds_with_slack]


BUDGET_COLUMNS = ["encoder_term", "field_term", "field_term_deterministic", "disc_term",
                  "decoder_term", "bound", "measured_total", "bound_holds", "holds_with_slack"]


@dataclass
class FieldError:
    """Injected perturbation ``e(t) = a + b sin(2 pi t)`` with ``a, b ~ N(0, scale^2 I)`` per trial."""

    scale: float = 0.0

    def coefficients(self, rng, n, dim):
        return self.scale * rng.standard_normal((n, dim)), self.scale * rng.standard_normal((n, dim))

    def expected_energy(self, dim, t_lo, t_hi) -> float:
        """``int E||e(t)||^2 dt = scale^2 d int (1 + sin^2(2 pi t)) dt``."""
        f = lambda t: 1.0 + np.sin(2 * np.pi * t) ** 2
        return self.scale ** 2 * dim * integrate.quad(f, t_lo, t_hi)[0]


def _norm_profile(a, b, t):
    """``||a + b sin(2 pi t)||`` per trial for a vector of times, shape (len(t), n)."""
    s = np.sin(2 * np.pi * np.asarray(t))[:, None, None]
    return np.linalg.norm(a[None] + s * b[None], axis=-1)


@dataclass
class BoundReport:
    budgets: list
    violations: int
    violations_with_slack: int
    trials: int
    lipschitz_integral: float
    disc_constant: float
    b_hat: float

    @property
    def violation_rate(self) -> float:
        return self.violations / self.trials

    def summary(self) -> dict:
        b = self.budgets
        return {
            "trials": self.trials, "violations": self.violations,
            "violations_with_slack": self.violations_with_slack,
            "violation_rate": self.violation_rate,
            "lipschitz_integral": self.lipschitz_integral,
            "disc_constant": self.disc_constant, "b_hat": self.b_hat,
            "mean_measured_total": float(np.mean([x.measured_total for x in b])),
            "mean_bound": float(np.mean([x.bound for x in b])),
            "mean_encoder_term": float(np.mean([x.encoder_term for x in b])),
            "mean_field_term": float(np.mean([x.field_term for x in b])),
            "mean_disc_term": float(np.mean([x.disc_term for x in b])),
            "mean_decoder_term": float(np.mean([x.decoder_term for x in b])),
        }


def verify_bound(world: ToyWorld, field, handle: EncoderHandle, cfg: SamplerConfig, delta: float = 0.1,
                 trials: int = 100, decoder=None, field_error: Optional[FieldError] = None,
                 n_ref: int = 2 ** 14, seed: int = 0, probe_radius: float = 1e-4) -> BoundReport:
    """Measure each term of the four-part translation-error bound over independent trials.

    Trials are integrated as one batch; each trial has its own latent, encoder
    offset and field perturbation. The ideal solution is a fine reference solve
    of the unperturbed field from the true endpoint; its distance to the true
    target (plus the reference's own discretization bound) is the decoder term.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if cfg.finalize != "none":
        raise UnmeasurableTermError("the bound is checked on the clipped window; use finalize='none'")
    if callable(cfg.g) or cfg.g != 0.0:
        raise UnmeasurableTermError("the bound covers the deterministic ODE sampler only (g must be 0)")
    if cfg.guidance > 1.0:
        raise UnmeasurableTermError("guided drifts have no Lipschitz/field-error model here")
    decoder = decoder or IdentityDecoder()
    if not hasattr(decoder, "lipschitz"):
        raise UnmeasurableTermError("decoder Lipschitz constant is unknown")
    field = as_field(field)
    field_error = field_error or FieldError(0.0)

    rng = np.random.default_rng([seed, 10])
    pairs = sample_pair(world, trials, seed)
    y_true = pairs.y
    y_hat = encode(handle, world, pairs.x1, 1, rng)
    a, b = field_error.coefficients(rng, trials, world.dim)

    def perturbation(t):
        return a + np.sin(2 * np.pi * t) * b

    learned = PerturbedField(field, perturbation) if field_error.scale > 0 else field
    if n_ref % cfg.n_steps:
        raise UnmeasurableTermError("n_ref must be a multiple of n_steps")
    keep = n_ref // cfg.n_steps
    sub = max(1, keep // 4)
    ref_cfg = SamplerConfig(n_steps=n_ref, eps=cfg.eps, t_start=cfg.t_start, finalize="none")
    ideal_ref = reverse_ode(field, y_true, ref_cfg, record_every=sub)
    learned_ref = reverse_ode(learned, y_hat, ref_cfg, record_every=sub)
    coarse = reverse_ode(learned, y_hat, cfg)

    # Lipschitz probes along the ideal, learned and discrete paths at the coarse grid times
    times = cfg.grid()
    stride = keep // sub
    probes = np.concatenate([ideal_ref.states[::stride], learned_ref.states[::stride], coarse.states], axis=1)
    probe_zT = np.concatenate([y_true, y_hat, y_hat], axis=0)
    # e(t) depends on neither z nor zT, so the perturbed field has the base field's Jacobians
    lip = estimate_lipschitz(field, probes, probe_zT, times, probe_radius)

    tau = cfg.step
    tau_ref = ref_cfg.step
    b_hat = second_derivative_bound(learned_ref.states, tau_ref * sub)
    b_ideal = second_derivative_bound(ideal_ref.states, tau_ref * sub)
    C_unit = discretization_constant(lip.state[:-1], tau, 1.0)
    L_fine = np.interp(ref_cfg.grid()[:-1][::-1], times[::-1], lip.state[::-1])[::-1]
    C_ref_unit = discretization_constant(L_fine, tau_ref, 1.0)

    L_D = float(decoder.lipschitz)
    W = gronwall_weights(lip, L_D)
    W_T = float(W[0])
    w_energy = weight_energy(lip, L_D)
    t_lo, t_hi = times[-1], times[0]
    energy = field_error.expected_energy(world.dim, t_lo, t_hi)

    # deterministic field term: int W(t) ||e(t)|| dt on a fine quadrature grid
    tq = np.linspace(t_lo, t_hi, 4097)
    Wq = np.interp(tq, times[::-1], W[::-1])
    e_norm = _norm_profile(a, b, tq)
    field_det = integrate.trapezoid(Wq[:, None] * e_norm, tq, axis=0)

    x_bar = decoder(coarse.final)
    x_true = pairs.x2
    z_star = ideal_ref.final
    enc_delta = np.linalg.norm(np.atleast_2d(y_hat - y_true), axis=1)
    measured = np.linalg.norm(np.atleast_2d(x_bar - x_true), axis=1)
    # the reference is itself discrete, so its own bound is added to the measured decoder gap
    decoder_terms = np.linalg.norm(np.atleast_2d(decoder(z_star) - x_true), axis=1) \
        + L_D * b_ideal * C_ref_unit * tau_ref ** 2
    field_prob = np.sqrt(w_energy * energy / delta)

    budgets = []
    for i in range(trials):
        budgets.append(ErrorBudget(
            encoder_term=W_T * float(enc_delta[i]),
            field_term=float(field_prob),
            disc_term=L_D * float(b_hat[i]) * C_unit * tau ** 2,
            decoder_term=float(decoder_terms[i]),
            measured_total=float(measured[i]),
            delta=delta,
            field_term_deterministic=float(field_det[i]),
        ))
    violations = sum(not x.bound_holds for x in budgets)
    slack_violations = sum(not x.holds_with_slack for x in budgets)
    return BoundReport(budgets, violations, slack_violations, trials, lip.integral(),
                       C_unit * float(np.max(b_hat)), float(np.max(b_hat)))


# -- convergence ----------------------------------------------------------------


@dataclass
class ConvergenceResult:
    n_steps: np.ndarray
    step_sizes: np.ndarray
    errors: np.ndarray
    slope: float
    intercept: float

    def ratios(self):
        return self.errors[:-1] / self.errors[1:]


def convergence_study(field, zT, n_list, cfg: Optional[SamplerConfig] = None, z_start=None,
                      n_ref: int = 2 ** 14, exact=None) -> ConvergenceResult:
    """Terminal error of the Euler sampler against a fine reference (or an exact value)."""
    cfg = cfg or SamplerConfig(finalize="none")
    base = cfg.to_dict()
    if exact is None:
        ref = reverse_ode(field, zT, SamplerConfig.from_dict({**base, "n_steps": n_ref}),
                          z_start=z_start, record_every=n_ref).final
    else:
        ref = np.asarray(exact, dtype=float)
    ns, taus, errs = [], [], []
    for n in n_list:
        c = SamplerConfig.from_dict({**base, "n_steps": int(n)})
        z = reverse_ode(field, zT, c, z_start=z_start, record_every=int(n)).final
        ns.append(int(n))
        taus.append(c.step)
        errs.append(float(np.linalg.norm(np.atleast_1d(z - ref))))
    ns, taus, errs = np.array(ns), np.array(taus), np.array(errs)
    ok = np.isfinite(errs) & (errs > 0)
    if ok.sum() < 3:
        raise DegenerateFitError(f"only {int(ok.sum())} usable points for the log-log fit")
    slope, intercept = np.polyfit(np.log(taus[ok]), np.log(errs[ok]), 1)
    return ConvergenceResult(ns, taus, errs, float(slope), float(intercept))


# -- Grönwall amplification ----------------------------------------------------------


@dataclass
class AmplificationResult:
    deviations: np.ndarray
    perturbation_norms: np.ndarray
    bounds: np.ndarray
    lipschitz_integral: float

    @property
    def pass_fraction(self) -> float:
        return float(np.mean(self.deviations <= self.bounds * SLACK))


def amplification_check(field, zT, cfg: SamplerConfig, norms, n_per_norm: int, seed: int = 0,
                        probe_radius: float = 1e-4) -> AmplificationResult:
    """Perturb the endpoint by exact-norm offsets and compare output deviation with ``exp(int L) ||Delta||``."""
    from .domains import unit_directions

    field = as_field(field)
    zT = np.asarray(zT, dtype=float)
    rng = np.random.default_rng([seed, 20])
    norms = np.repeat(np.asarray(norms, dtype=float), n_per_norm)
    zT_b = np.broadcast_to(zT, (len(norms), zT.shape[-1])) if zT.ndim == 1 else zT
    pert = zT_b + norms[:, None] * unit_directions(rng, len(norms), zT_b.shape[1])
    base = reverse_ode(field, zT_b, cfg)
    moved = reverse_ode(field, pert, cfg)
    probes = np.concatenate([base.states, moved.states], axis=1)
    lip = estimate_lipschitz(field, probes, np.concatenate([zT_b, pert]), cfg.grid(), probe_radius)
    integral = lip.integral()
    dev = np.linalg.norm(moved.final - base.final, axis=1)
    return AmplificationResult(dev, norms, np.exp(integral) * norms, integral)


# -- alignment metrics ------------------------------------------------------------


def _drop_zero_rows(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] != b.shape[0]:
        raise ValueError("feature sets must have equal size")
    keep = (np.linalg.norm(a, axis=1) > 0) & (np.linalg.norm(b, axis=1) > 0)
    return a[keep], b[keep], int((~keep).sum())


def cosine_mean(a, b):
    """Mean cosine similarity of paired rows; returns ``(value, excluded_zero_rows)``."""
    a, b, dropped = _drop_zero_rows(a, b)
    if a.shape[0] == 0:
        raise ValueError("no nonzero feature pairs")
    cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return float(cos.mean()), dropped


def delta_cosim(generated, target, source):
    """Gain in alignment with the target: ``cos(gen, tgt) - cos(src, tgt)``."""
    return cosine_mean(generated, target)[0] - cosine_mean(source, target)[0]


def hsic_unbiased(K, L):
    m = K.shape[0]
    if m < 4:
        raise ValueError("unbiased HSIC needs at least 4 samples")
    K = K.copy()
    L = L.copy()
    np.fill_diagonal(K, 0.0)
    np.fill_diagonal(L, 0.0)
    term = np.sum(K * L.T) + K.sum() * L.sum() / ((m - 1) * (m - 2)) - 2.0 * np.sum(K @ L) / (m - 2)
    return term / (m * (m - 3))


def mutual_knn_mask(K, L, k):
    m = K.shape[0]

    def topk(G):
        G = G.copy()
        np.fill_diagonal(G, -np.inf)
        idx = np.argsort(-G, axis=1, kind="stable")[:, :k]
        mask = np.zeros_like(G)
        mask[np.arange(m)[:, None], idx] = 1.0
        return mask

    return topk(K) * topk(L)


def cknna(a, b, k: int = 10):
    """Centered kernel alignment restricted to mutual k-nearest-neighbour pairs (linear kernels)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] != b.shape[0]:
        raise ValueError("feature sets must have equal size")
    if not 0 < k < a.shape[0]:
        raise ValueError("k must lie in [1, n)")
    K = a @ a.T
    L = b @ b.T

    def masked(G, H):
        mask = mutual_knn_mask(G, H, k)
        return hsic_unbiased(mask * G, mask * H)

    # each self term uses its own neighbourhoods, so unrelated features score near zero
    kl, kk, ll = masked(K, L), masked(K, K), masked(L, L)
    denom = np.sqrt(kk * ll)
    if not denom > 0:
        raise ValueError("degenerate kernels: masked self-alignment is not positive")
    return float(kl / denom)


@dataclass
class AlignmentReport:
    cosine: float
    cknna: float
    excluded: int


def alignment_metrics(a, b, k: int = 10) -> AlignmentReport:
    cos, dropped = cosine_mean(a, b)
    a2, b2, _ = _drop_zero_rows(a, b)
    return AlignmentReport(cos, cknna(a2, b2, k), dropped)


def energy_distance(a, b) -> float:
    """Energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with unbiased within-sample means."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n, m = a.shape[0], b.shape[0]
    xy = cdist(a, b).mean()
    xx = cdist(a, a).sum() / (n * (n - 1))
    yy = cdist(b, b).sum() / (m * (m - 1))
    return float(2 * xy - xx - yy)
