"""Handlers for the verify, cost and bench subcommands."""

import hashlib
import logging
import statistics
import sys
import timeit
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, TextIO

import cost_model
from config import settings
from criss_cross import cca3d_forward
from nonlocal_ref import NonLocalWeights, nonlocal_forward
from rcca import make_weights, rcca_forward
from tensor_core import FeatureMap4D
from utils import RunManifest
from validators import PropertyValidator

logger = logging.getLogger(__name__)

DEFAULT_BENCH_DIMS = (64, 8, 28, 28)


def cmd_verify(manifest: RunManifest, out: Optional[TextIO] = None) -> int:
    """Run the property suite; 0 when every check passes, 1 otherwise."""
    out = out or sys.stdout
    only = manifest.options.get('only')
    logger.info(f"Verify with seed {manifest.seed}, groups: {', '.join(only) if only else 'all'}")

    validator = PropertyValidator(
        seed=manifest.seed,
        threads=manifest.threads,
        oracle_trials=manifest.options.get('trials'),
    )
    report = validator.run(only=only)
    out.write(report.render())
    if not only or 'cost' in only:
        out.write('\n' + cost_model.render_cells(cost_model.reproduce_tables()))

    for failure in report.failures:
        logger.warning(f"FAILED {failure.group}/{failure.name}: {failure.detail}")
    return 0 if report.passed else 1


def cmd_cost(manifest: RunManifest, out: Optional[TextIO] = None) -> int:
    """Print cost reports for one geometry, or the reproduced table cells."""
    out = out or sys.stdout
    fmt = manifest.options.get('format') or 'text'
    cfg = manifest.config

    if manifest.options.get('tables'):
        out.write(cost_model.render_cells(cost_model.reproduce_tables(), fmt))
        return 0

    name = manifest.options.get('geometry') or 'conv3_3'
    names = cost_model.SWEEP_STAGES if name == 'all' else (name,)
    reports = []
    for geom in (cost_model.get_geometry(n) for n in names):
        if manifest.options.get('nl'):
            reports.append(cost_model.nonlocal_cost(geom))
        else:
            reports.append(cost_model.cca_module_cost(geom, cfg.channel_fraction, cfg.variant))
        reports.append(cost_model.rcca_total_cost(geom, cfg.recurrence, cfg.channel_fraction, cfg.variant))
    out.write(cost_model.render_reports(reports, fmt))
    logger.info(f"Cost reports for {', '.join(names)}: R={cfg.recurrence}, C_d={cfg.channel_fraction}")
    return 0


@dataclass
class BenchResult:
    """Median wall-clock of one forward, plus a digest of its output."""
    name: str
    samples: List[float] = field(default_factory=list)
    digest: str = ''

    @property
    def median(self) -> float:
        return statistics.median(self.samples)


def _time(name: str, forward: Callable[[], FeatureMap4D], repeats: int) -> BenchResult:
    result = BenchResult(name)
    output = forward()
    result.digest = hashlib.sha256(output.data.tobytes()).hexdigest()[:16]
    for _ in range(repeats):
        start = timeit.default_timer()
        forward()
        result.samples.append(timeit.default_timer() - start)
    logger.info(f"{name}: median {result.median * 1000:.2f} ms over {repeats} runs")
    return result


def run_benchmark(manifest: RunManifest) -> Dict[str, BenchResult]:
    """Time CCA-3D, RCCA-3D and the non-local block on the same input."""
    dims = manifest.dims or DEFAULT_BENCH_DIMS
    repeats = manifest.options.get('repeats') or settings.bench_repeats
    cfg = manifest.config
    rng = manifest.rng()

    x = FeatureMap4D.random(dims, rng, precision=manifest.precision)
    weights = make_weights(cfg, x.channels, rng, precision=manifest.precision)
    nl_weights = NonLocalWeights.random(x.channels, rng, precision=manifest.precision)
    logger.info(f"Benchmarking on {dims}, {manifest.precision}-bit, variant {cfg.variant}, R={cfg.recurrence}")

    results = {}
    if cfg.variant != 'c':
        results['cca3d'] = _time('cca3d_forward', lambda: cca3d_forward(x, weights)[0], repeats)
    results['rcca'] = _time(f"rcca_forward(R={cfg.recurrence})",
                            lambda: rcca_forward(x, cfg, weights)[0], repeats)
    results['nonlocal'] = _time('nonlocal_forward', lambda: nonlocal_forward(x, nl_weights), repeats)
    return results


def cmd_bench(manifest: RunManifest, out: Optional[TextIO] = None) -> int:
    out = out or sys.stdout
    results = run_benchmark(manifest)
    for result in results.values():
        out.write(f"{result.name:<24} median {result.median * 1000:10.3f} ms  output {result.digest}\n")
    speedup = results['nonlocal'].median / max(results['rcca'].median, 1e-12)
    out.write(f"non-local / RCCA-3D wall-clock ratio: {speedup:.2f}\n")
    return 0
