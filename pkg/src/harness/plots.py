import logging
import os
from typing import Iterable, List

import numpy as np

from harness.data_manager import OutputError

logger = logging.getLogger('Plots')

RECIPE = """\
Plot-ready data written by the experiment harness.

Every .dat file holds two whitespace-separated columns and no header.

  regret.dat       t        mean cumulative regret R(t) over seeds
  regret_sqrt.dat  t        R(t) / sqrt(t)
  lambda_min.dat   t_k      mean smallest preconditioner eigenvalue at episode start
  theta_err.dat    t_k      mean |theta_k - theta*| of the sampled parameter

gnuplot:
  set xlabel 't'
  plot 'regret.dat' with lines title 'R(t)'
  plot 'regret_sqrt.dat' with lines title 'R(t)/sqrt(t)'
  set logscale y; plot 'lambda_min.dat' with linespoints title 'lambda_min'
  plot 'theta_err.dat' with linespoints title '|theta - theta*|'

matplotlib:
  import numpy as np, matplotlib.pyplot as plt
  t, r = np.loadtxt('regret.dat', unpack=True, ndmin=2)
  plt.plot(t, r); plt.xlabel('t'); plt.ylabel('R(t)'); plt.show()
"""


def _write_columns(path: str, x: Iterable, y: Iterable):
    with open(path, 'w') as f:
        for a, b in zip(x, y):
            f.write(f"{a} {float(b)!r}\n")


def emit_plots(report, outdir: str) -> List[str]:
    """Write two-column data files for the regret and posterior-concentration curves

    Args:
        report (AggregateReport): Completed batch report
        outdir (str): Target directory, created if missing

    Returns:
        List[str]: Paths written, recipe last

    Raises:
        OutputError: If a file cannot be written
    """
    t = np.asarray(report.t)
    regret = np.asarray(report.mean_cum_regret)
    files = {
        'regret.dat': (t, regret),
        'regret_sqrt.dat': (t, regret / np.sqrt(t) if t.size else regret),
        'lambda_min.dat': (report.episode_t_start, report.mean_lambda_min),
        'theta_err.dat': (report.episode_t_start, report.mean_theta_err),
    }

    paths = []
    try:
        os.makedirs(outdir, exist_ok=True)
        for name, (x, y) in files.items():
            path = os.path.join(outdir, name)
            _write_columns(path, np.asarray(x).tolist(), y)
            paths.append(path)
        recipe = os.path.join(outdir, 'RECIPE.txt')
        with open(recipe, 'w') as f:
            f.write(RECIPE)
        paths.append(recipe)
    except OSError as e:
        logger.error(f"Error writing plot data to {outdir}: {str(e)}")
        raise OutputError(f"Cannot write plot data to {outdir}: {e}")

    logger.info(f"Wrote {len(paths)} plot file(s) to {outdir}")
    return paths
