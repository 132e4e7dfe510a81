"""Small CLI run configurations shared by the CLI and acceptance tests."""
import hashlib
from pathlib import Path

import tomli_w

SMALL = {
    "seed": 11,
    "family": "gaussian",
    "domain": {"kind": "lattice", "rows": 4, "cols": 4},
    "simulation": {"study": "gaussian", "T": 5, "horizon": 1, "beta": [1.0]},
    "basis": {"r_s": 4, "r_t": 3, "n_mc": 50},
    "calibration": {"replicates": 20},
    "epr": {"n_reps": 40, "hyperprior": {"sigma2_beta": 1.0, "sigma2_eta": 1.0, "sigma2_xi": 1.0}},
}


def merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def write_config(path, data_dir=None, **over):
    """Write a small TOML config; ``data_dir`` points ``[data]`` at simulate outputs."""
    cfg = merge(SMALL, over)
    if data_dir is not None:
        data_dir = Path(data_dir)
        data = {"observations": str(data_dir / "observations.csv"), "latent": str(data_dir / "latent.csv")}
        if (data_dir / "truth.csv").exists():
            data["truth"] = str(data_dir / "truth.csv")
        cfg = merge(cfg, {"data": data})
    path = Path(path)
    path.write_bytes(tomli_w.dumps(cfg).encode())
    return path


def tree_digest(root) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}
