"""Property suite behind the verify command."""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import backward
import cost_model
import criss_cross
import nonlocal_ref
import rcca
from config import VARIANTS, settings
from tensor_core import FeatureMap4D, Matrix, axpy, max_abs_diff
from utils import make_rng

logger = logging.getLogger(__name__)

Outcome = Tuple[bool, str]

GROUPS = ('paths', 'softmax', 'oracle', 'sparsity', 'reachability', 'gradients', 'cost')


@dataclass
class CheckResult:
    """Outcome of one named property."""
    group: str
    name: str
    passed: bool
    detail: str = ''


@dataclass
class VerificationReport:
    """Results of a verify run."""
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    @property
    def score(self) -> float:
        """Fraction of checks passed (1.0 for an empty run)."""
        if not self.results:
            return 1.0
        return sum(r.passed for r in self.results) / len(self.results)

    def render(self) -> str:
        lines = []
        for r in self.results:
            status = 'PASS' if r.passed else 'FAIL'
            line = f"[{status}] {r.group}/{r.name}"
            if r.detail:
                line += f": {r.detail}"
            lines.append(line)
        lines.append(f"{len(self.results) - len(self.failures)}/{len(self.results)} checks passed")
        return '\n'.join(lines) + '\n'


def _random_dims(rng: np.random.Generator, limits: Sequence[int]) -> Tuple[int, ...]:
    return tuple(int(rng.integers(1, n + 1)) for n in limits)


def _star(v: criss_cross.Position, grid: criss_cross.Grid) -> np.ndarray:
    """Positions sharing at least two coordinates with ``v``."""
    shared = sum((np.indices(grid)[axis] == v[axis]).astype(int) for axis in range(3))
    return shared >= 2


def _perturbation_response(fn: Callable[[FeatureMap4D], FeatureMap4D], x: FeatureMap4D,
                           v: criss_cross.Position, delta: float = 1e-3) -> np.ndarray:
    """Max over channels of |fn(x + delta at v) - fn(x)|, per position."""
    bumped = x.data.copy()
    bumped[(slice(None),) + tuple(v)] += delta
    change = fn(FeatureMap4D(bumped)).data - fn(x).data
    return np.abs(change).max(axis=0)


def _agrees_with_mask(response: np.ndarray, mask: np.ndarray, coverage: float = 0.99) -> Outcome:
    leaked = int(np.count_nonzero(response[~mask]))
    if leaked:
        return False, f"{leaked} positions outside the reachable set changed"
    inside = response[mask]
    hit = float(np.mean(inside > 1e-12)) if inside.size else 1.0
    if hit < coverage:
        return False, f"only {hit:.1%} of reachable positions responded"
    return True, ''


class PropertyValidator:
    """Randomised property checks grouped by module concern."""

    def __init__(self, seed: int = 0, threads: int = 1, oracle_trials: Optional[int] = None,
                 gradient_seeds: int = 5, grad_rtol: Optional[float] = None,
                 fd_epsilon: Optional[float] = None):
        self.seed = seed
        self.threads = max(1, threads)
        self.oracle_trials = oracle_trials or settings.oracle_trials
        self.gradient_seeds = gradient_seeds
        self.grad_rtol = grad_rtol or settings.grad_rtol
        self.fd_epsilon = fd_epsilon or settings.fd_epsilon

    def _rng(self, *stream: int) -> np.random.Generator:
        return make_rng(self.seed, *stream)

    def _map(self, fn: Callable, items: Iterable) -> List:
        """Ordered map over independent trials; each trial seeds its own generator."""
        items = list(items)
        if self.threads == 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    # paths

    def validate_path_combinatorics(self, trials: int = 40) -> Outcome:
        rng = self._rng(1)
        for _ in range(trials):
            dims = _random_dims(rng, (8, 8, 8))
            u = tuple(int(rng.integers(0, n)) for n in dims)
            path = criss_cross.path_indices(u, dims)
            if len(path) != criss_cross.path_length(dims):
                return False, f"path of {u} in {dims} has {len(path)} entries"
            if len(set(path)) != len(path):
                return False, f"path of {u} in {dims} repeats a position"
            if list(path).count(u) != 1:
                return False, f"anchor {u} appears {list(path).count(u)} times in its path"
        return True, f"{trials} random anchors"

    @staticmethod
    def validate_path_table(dims: criss_cross.Grid = (3, 4, 5)) -> Outcome:
        table = criss_cross.path_table(dims)
        for flat, u in enumerate(np.ndindex(*dims)):
            expected = [np.ravel_multi_index(p, dims) for p in criss_cross.path_indices(u, dims)]
            if table[flat].tolist() != expected:
                return False, f"flat path table disagrees with path_indices at {u}"
        return True, ''

    # softmax

    def validate_softmax_normalization(self) -> Outcome:
        rng = self._rng(2)
        worst = 0.0
        for scale in (1.0, 1e2, 1e4):
            dims = _random_dims(rng, (4, 5, 5))
            scores = rng.standard_normal((criss_cross.path_length(dims),) + dims) * scale
            a = criss_cross.softmax_over_path(criss_cross.AttentionMap(scores)).data
            if (a < 0).any():
                return False, f"negative attention weight at scale {scale:g}"
            worst = max(worst, float(np.abs(a.sum(axis=0) - 1).max()))
        return worst <= 1e-6, f"max |sum - 1| = {worst:.2e}"

    def validate_softmax_shift(self) -> Outcome:
        rng = self._rng(3)
        dims = (3, 4, 5)
        scores = rng.standard_normal((criss_cross.path_length(dims),) + dims)
        shift = rng.uniform(-50, 50, size=(1,) + dims)
        a = criss_cross.softmax_over_path(criss_cross.AttentionMap(scores)).data
        b = criss_cross.softmax_over_path(criss_cross.AttentionMap(scores + shift)).data
        diff = float(np.abs(a - b).max())
        return diff <= 1e-6, f"max diff {diff:.2e}"

    def validate_large_input_forward(self) -> Outcome:
        rng = self._rng(4)
        x = FeatureMap4D.random((4, 2, 3, 3), rng, precision=64, scale=1e4)
        weights = criss_cross.CcaWeights.random(4, 2, rng)
        _, cache = criss_cross.cca3d_forward(x, weights)
        worst = float(np.abs(cache.attention.data.sum(axis=0) - 1).max())
        return worst <= 1e-6, f"max |sum - 1| = {worst:.2e} with inputs scaled by 1e4"

    # oracle

    def _oracle_trial(self, trial: int, precision: int = 64) -> float:
        rng = self._rng(5, precision, trial)
        c, t, h, w = _random_dims(rng, (8, 3, 6, 6))
        inner = max(1, c // int(rng.choice([1, 2, 4])))
        x = FeatureMap4D.random((c, t, h, w), rng, precision=precision)
        weights = criss_cross.CcaWeights.random(c, inner, rng, precision=precision)
        out, _ = criss_cross.cca3d_forward(x, weights)
        ref = nonlocal_ref.masked_dense_cca_oracle(x, weights, nonlocal_ref.criss_cross_mask(x.grid))
        return max_abs_diff(out, ref)

    def validate_oracle_equivalence(self) -> Outcome:
        diffs = self._map(self._oracle_trial, range(self.oracle_trials))
        worst = max(diffs)
        return worst <= 1e-10, f"{len(diffs)} trials, max diff {worst:.2e} (64-bit)"

    def validate_oracle_equivalence_32(self, trials: int = 10) -> Outcome:
        diffs = self._map(lambda i: self._oracle_trial(i, precision=32), range(trials))
        worst = max(diffs)
        return worst <= 1e-5, f"{trials} trials, max diff {worst:.2e} (32-bit)"

    def validate_single_position(self) -> Outcome:
        rng = self._rng(6)
        x = FeatureMap4D.random((5, 1, 1, 1), rng, precision=64)
        weights = criss_cross.CcaWeights.random(5, 2, rng)
        out, _ = criss_cross.cca3d_forward(x, weights)
        expected = weights.wv.data @ x.flat()
        dense = nonlocal_ref.masked_dense_cca_oracle(x, weights, nonlocal_ref.full_mask(x.grid))
        diff = max(float(np.abs(out.flat() - expected).max()), float(np.abs(dense.flat() - expected).max()))
        return diff <= 1e-12, f"H and all-pairs oracle vs Wv X diff {diff:.2e}"

    def validate_self_mask(self) -> Outcome:
        rng = self._rng(16)
        x = FeatureMap4D.random((3, 2, 3, 3), rng, precision=64)
        weights = criss_cross.CcaWeights.random(3, 1, rng)
        out = nonlocal_ref.masked_dense_cca_oracle(x, weights, nonlocal_ref.self_mask(x.grid))
        diff = float(np.abs(out.flat() - weights.wv.data @ x.flat()).max())
        return diff <= 1e-12, f"self-only oracle vs Wv X diff {diff:.2e}"

    def validate_gamma_zero_identity(self) -> Outcome:
        rng = self._rng(7)
        x = FeatureMap4D.random((4, 2, 3, 3), rng, precision=64)
        for variant, recurrence in itertools.product(VARIANTS, (1, 2, 3)):
            cfg = rcca.RccaConfig(variant, recurrence, Fraction(1, 2))
            weights = rcca.make_weights(cfg, x.channels, rng, gamma=0.0)
            y, _ = rcca.rcca_forward(x, cfg, weights)
            if not np.array_equal(y.data, x.data):
                return False, f"variant {variant}, R={recurrence}: output differs from input"
        return True, 'all variants, R=1..3'

    def validate_recurrence_composition(self) -> Outcome:
        rng = self._rng(8)
        x = FeatureMap4D.random((6, 2, 3, 3), rng, precision=64)
        cfg = rcca.RccaConfig('a', 3, Fraction(1, 2))
        weights = rcca.make_weights(cfg, x.channels, rng)
        y, _ = rcca.rcca_forward(x, cfg, weights)
        expected = x
        for _ in range(cfg.recurrence):
            h, _ = criss_cross.cca3d_forward(expected, weights)
            expected = axpy(weights.gamma, h, x)
        diff = max_abs_diff(y, expected)
        return diff == 0.0, f"diff {diff:.2e}"

    # sparsity

    def validate_structural_sparsity(self) -> Outcome:
        rng = self._rng(9)
        x = FeatureMap4D.random((3, 3, 4, 5), rng, precision=64)
        weights = criss_cross.CcaWeights.random(3, 2, rng)
        forward = lambda m: criss_cross.cca3d_forward(m, weights)[0]
        for _ in range(5):
            v = tuple(int(rng.integers(0, n)) for n in x.grid)
            ok, detail = _agrees_with_mask(_perturbation_response(forward, x, v), _star(v, x.grid))
            if not ok:
                return False, f"source {v}: {detail}"
        return True, ''

    def validate_axis_equivariance(self) -> Outcome:
        rng = self._rng(10)
        x = FeatureMap4D.random((3, 3, 4, 5), rng, precision=64)
        weights = criss_cross.CcaWeights.random(3, 2, rng)
        out, _ = criss_cross.cca3d_forward(x, weights)
        for axis in (1, 2, 3):
            perm = rng.permutation(x.dims[axis])
            permuted, _ = criss_cross.cca3d_forward(FeatureMap4D(np.take(x.data, perm, axis=axis)), weights)
            diff = float(np.abs(permuted.data - np.take(out.data, perm, axis=axis)).max())
            if diff > 1e-6:
                return False, f"axis {axis}: diff {diff:.2e}"
        return True, ''

    def validate_value_scaling(self) -> Outcome:
        rng = self._rng(11)
        x = FeatureMap4D.random((3, 2, 3, 4), rng, precision=64)
        weights = criss_cross.CcaWeights.random(3, 2, rng)
        scaled = replace(weights, wv=Matrix(weights.wv.data * 2.5))
        out, _ = criss_cross.cca3d_forward(x, weights)
        out_scaled, _ = criss_cross.cca3d_forward(x, scaled)
        diff = float(np.abs(out_scaled.data - 2.5 * out.data).max())
        return diff <= 1e-12, f"diff {diff:.2e}"

    # reachability

    @staticmethod
    def validate_reachability_closure(extent: int = 5) -> Outcome:
        for dims in itertools.product(range(2, extent + 1), repeat=3):
            for v in np.ndindex(*dims):
                if not np.array_equal(rcca.influence_mask(1, dims, v), _star(v, dims)):
                    return False, f"R=1 set of {v} in {dims} is not the criss-cross star"
                if not rcca.influence_mask(3, dims, v).all():
                    return False, f"R=3 set of {v} in {dims} is not the full grid"
        return True, f"all dims 2..{extent}"

    def _empirical_trial(self, item) -> Outcome:
        index, dims = item
        rng = self._rng(12, index)
        variant = VARIANTS[index % len(VARIANTS)]
        x = FeatureMap4D.random((4,) + dims, rng, precision=64)
        v = tuple(int(rng.integers(0, n)) for n in dims)
        for recurrence in (1, 3):
            cfg = rcca.RccaConfig(variant, recurrence, Fraction(1, 2))
            weights = rcca.make_weights(cfg, x.channels, rng)
            forward = lambda m: rcca.rcca_forward(m, cfg, weights)[0]
            mask = rcca.influence_mask(recurrence, dims, v)
            ok, detail = _agrees_with_mask(_perturbation_response(forward, x, v), mask)
            if not ok:
                return False, f"dims {dims}, v={v}, variant {variant}, R={recurrence}: {detail}"
        return True, ''

    def validate_reachability_empirical(self, extent: int = 5) -> Outcome:
        items = list(enumerate(itertools.product(range(2, extent + 1), repeat=3)))
        outcomes = self._map(self._empirical_trial, items)
        failed = [detail for ok, detail in outcomes if not ok]
        if failed:
            return False, failed[0]
        return True, f"{len(items)} grids, R=1 and R=3"

    # gradients

    def _gradient_trial(self, item) -> Tuple[str, float]:
        variant, recurrence, seed = item
        rng = self._rng(13, seed)
        cfg = rcca.RccaConfig(variant, recurrence, Fraction(1, 2))
        x = FeatureMap4D.random((4, 2, 3, 3), rng, precision=64)
        weights = rcca.make_weights(cfg, x.channels, rng)
        errors = backward.gradient_check(cfg, x, weights, eps=self.fd_epsilon)
        name = max(errors, key=errors.get)
        return f"{variant}/R={recurrence}/seed={seed}/{name}", errors[name]

    def validate_gradients(self) -> Outcome:
        items = list(itertools.product(VARIANTS, (1, 2, 3), range(self.gradient_seeds)))
        worst_name, worst = max(self._map(self._gradient_trial, items), key=lambda r: r[1])
        return worst <= self.grad_rtol, f"{len(items)} configs, worst {worst:.2e} at {worst_name}"

    def validate_untied_gamma_gradients(self) -> Outcome:
        rng = self._rng(14)
        cfg = rcca.RccaConfig('d', 3, Fraction(1, 2), untied_gamma=True)
        x = FeatureMap4D.random((3, 2, 2, 3), rng, precision=64)
        weights = rcca.make_weights(cfg, x.channels, rng).with_step_gammas([0.7, 1.1, 0.9])
        errors = backward.gradient_check(cfg, x, weights, eps=self.fd_epsilon)
        worst = max(errors.values())
        return worst <= self.grad_rtol, f"worst {worst:.2e}"

    def validate_unreachable_gradient(self) -> Outcome:
        rng = self._rng(15)
        x = FeatureMap4D.random((3, 3, 4, 4), rng, precision=64)
        cfg = rcca.RccaConfig('a', 1, Fraction(1, 2))
        weights = rcca.make_weights(cfg, x.channels, rng)
        _, cache = rcca.rcca_forward(x, cfg, weights)
        u = (1, 2, 1)
        g = np.zeros(x.dims)
        g[(slice(None),) + u] = rng.standard_normal(x.channels)
        dx = backward.rcca_backward(cfg, cache, FeatureMap4D(g)).dx.data
        leaked = int(np.count_nonzero(np.abs(dx).max(axis=0)[~_star(u, x.grid)]))
        return leaked == 0, f"{leaked} unreachable inputs with nonzero gradient"

    # cost

    @staticmethod
    def validate_cost_tables() -> Outcome:
        cells = cost_model.reproduce_tables()
        failing = [c for c in cells if c.status == cost_model.FAIL]
        diverging = [c for c in cells if c.status == cost_model.DIVERGES]
        if failing:
            c = failing[0]
            return False, f"{c.table} {c.row} {c.quantity}: expected {c.expected}, got {c.actual:.3f}"
        return True, f"{len(cells) - len(diverging)} cells match, {len(diverging)} known divergences"

    @staticmethod
    def validate_cost_scaling() -> Outcome:
        geom = cost_model.STAGE_GEOMETRIES['conv3_3']
        for variant in VARIANTS:
            reports = [cost_model.rcca_total_cost(geom, r, '1/4', variant) for r in range(1, 9)]
            steps = {b.flops - a.flops for a, b in zip(reports, reports[1:])}
            if len(steps) != 1 or steps.pop() != reports[0].flops:
                return False, f"variant {variant}: FLOPs not linear in R"
            if len({r.params for r in reports}) != 1:
                return False, f"variant {variant}: params depend on R"
        return True, 'R=1..8, all variants'

    @staticmethod
    def validate_cost_asymptotics() -> Outcome:
        geom = cost_model.STAGE_GEOMETRIES['conv3_3']
        doubled = geom.with_frames(2 * geom.frames)
        cca_ratio = cost_model.attention_macs(doubled, '1/4') / cost_model.attention_macs(geom, '1/4')
        cca_expected = 2 * doubled.path_length / geom.path_length
        nl_ratio = cost_model.nonlocal_pairwise_macs(doubled) / cost_model.nonlocal_pairwise_macs(geom)
        ok = abs(cca_ratio / cca_expected - 1) <= 0.05 and abs(nl_ratio / 4 - 1) <= 0.05
        return ok, f"CCA x{cca_ratio:.3f} (expected x{cca_expected:.3f}), non-local x{nl_ratio:.3f}"

    # running

    def checks(self) -> Dict[str, List[Tuple[str, Callable[[], Outcome]]]]:
        return {
            'paths': [
                ('path_combinatorics', self.validate_path_combinatorics),
                ('path_table', self.validate_path_table),
            ],
            'softmax': [
                ('normalization', self.validate_softmax_normalization),
                ('shift_invariance', self.validate_softmax_shift),
                ('large_inputs', self.validate_large_input_forward),
            ],
            'oracle': [
                ('dense_equivalence_64', self.validate_oracle_equivalence),
                ('dense_equivalence_32', self.validate_oracle_equivalence_32),
                ('single_position', self.validate_single_position),
                ('self_mask', self.validate_self_mask),
                ('gamma_zero_identity', self.validate_gamma_zero_identity),
                ('recurrence_composition', self.validate_recurrence_composition),
            ],
            'sparsity': [
                ('structural_sparsity', self.validate_structural_sparsity),
                ('axis_equivariance', self.validate_axis_equivariance),
                ('value_scaling', self.validate_value_scaling),
            ],
            'reachability': [
                ('closure', self.validate_reachability_closure),
                ('empirical_perturbation', self.validate_reachability_empirical),
            ],
            'gradients': [
                ('finite_differences', self.validate_gradients),
                ('untied_gamma', self.validate_untied_gamma_gradients),
                ('unreachable_inputs', self.validate_unreachable_gradient),
            ],
            'cost': [
                ('table_cells', self.validate_cost_tables),
                ('recurrence_scaling', self.validate_cost_scaling),
                ('asymptotics', self.validate_cost_asymptotics),
            ],
        }

    @staticmethod
    def _guard(group: str, name: str, check: Callable[[], Outcome]) -> CheckResult:
        try:
            passed, detail = check()
        except Exception as e:
            logger.warning(f"Check {group}/{name} raised {type(e).__name__}: {e}")
            return CheckResult(group, name, False, f"{type(e).__name__}: {e}")
        if not passed:
            logger.warning(f"Check {group}/{name} failed: {detail}")
        return CheckResult(group, name, bool(passed), detail)

    def run(self, only: Optional[Iterable[str]] = None) -> VerificationReport:
        """Run the selected groups (all by default); exceptions become failed checks."""
        selected = list(only) if only else list(GROUPS)
        unknown = [g for g in selected if g not in GROUPS]
        if unknown:
            raise ValueError(f"Unknown check groups {unknown}, expected some of {GROUPS}")

        report = VerificationReport()
        table = self.checks()
        for group in selected:
            logger.info(f"Running {group} checks")
            for name, check in table[group]:
                report.results.append(self._guard(group, name, check))
        logger.info(f"Verification score={report.score:.2f}, failures={len(report.failures)}")
        return report
