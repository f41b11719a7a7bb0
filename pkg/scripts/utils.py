import csv
import json
import os

import numpy as np


def fmt(value):
    """CSV cell text: repr for floats so reruns are byte-identical, blank for None."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=4, sort_keys=True)


def trial_dir(out, mode, grid_index, seed):
    path = os.path.join(out, "trials", "{}_g{:03d}_s{}".format(mode, grid_index, seed))
    os.makedirs(path, exist_ok=True)
    return path


def loglog_slope(xs, ys):
    """Least-squares slope of log(y) against log(x)."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if len(xs) < 2 or np.any(xs <= 0) or np.any(ys <= 0):
        return float("nan")
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)


def count_inversions(values, increasing=True):
    """Adjacent pairs that break the expected monotone direction."""
    values = list(values)
    if increasing:
        return sum(1 for a, b in zip(values, values[1:]) if b < a)
    return sum(1 for a, b in zip(values, values[1:]) if b > a)


def binomial_floor(p, trials, sigmas=3.0):
    """One-sided acceptance floor p - k*sqrt(p(1-p)/trials)."""
    return p - sigmas * float(np.sqrt(p * (1.0 - p) / trials))
