"""
Fit archives and run manifests.

An archive directory holds the model document and tables it was fitted on,
`fit.json` with the hyperparameter mode, Hessian and integration points, and
per-point binary arrays (`point_<h>_mode.npy`, `point_<h>_precision.npz`).
Loading re-parses and re-assembles the model and rebuilds each point's
Gaussian approximation from its stored mode and precision.
"""

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import sparse

from config.config import config_loader
from src.services.assembly import assemble
from src.services.errors import ArchiveError
from src.services.inference import (
    FitResult,
    GaussianApprox,
    HyperPosterior,
    IntegrationPoint,
    _project,
    latent_marginals,
)
from src.services.model_spec import IntStrategy, parse_config
from src.services.sparse_linalg import factorize

logger = logging.getLogger(__name__)

FIT_FILE = "fit.json"
CONFIG_FILE = "config.json"
LONG_FILE = "long.csv"
SURV_FILE = "surv.csv"
MANIFEST_FILE = "manifest.json"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_atomic(path, text: str) -> None:
    """Write text through a temporary file in the same directory and rename it into place"""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_version() -> int:
    return int(config_loader.load_engine_config()["engine"]["archive"]["format_version"])


def save_fit(fit: FitResult, directory) -> List[Path]:
    """Write the archive; returns the files written"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = fit.model.spec
    written = []

    write_atomic(directory / CONFIG_FILE, json.dumps(spec.to_config(), indent=2, sort_keys=True))
    written.append(directory / CONFIG_FILE)
    if spec.long_data is not None and spec.longitudinal:
        spec.long_data.to_csv(directory / LONG_FILE, index=False)
        written.append(directory / LONG_FILE)
    if spec.surv_data is not None and spec.survival:
        spec.surv_data.to_csv(directory / SURV_FILE, index=False)
        written.append(directory / SURV_FILE)

    points = []
    for h, point in enumerate(fit.points):
        approx = point.approx
        mode_file, prec_file = f"point_{h}_mode.npy", f"point_{h}_precision.npz"
        np.save(directory / mode_file, approx.mode)
        sparse.save_npz(directory / prec_file, sparse.csc_matrix(approx.precision))
        written += [directory / mode_file, directory / prec_file]
        points.append({
            "omega": point.omega.tolist(),
            "z": point.z.tolist(),
            "weight": point.weight,
            "log_post": point.log_post,
            "loglik": approx.loglik,
            "iterations": approx.iterations,
            "newton_steps": approx.newton_steps,
            "step_norm": approx.step_norm,
            "mode_file": mode_file,
            "precision_file": prec_file,
        })

    hyper = fit.hyper_posterior
    document = {
        "format_version": _format_version(),
        "strategy": fit.strategy.value,
        "mode": fit.mode.tolist(),
        "hessian": fit.hessian.tolist(),
        "hyper_names": fit.model.hyper.names,
        "latent_names": fit.model.latent_names(),
        "hyper_posterior": {
            "transform": hyper.transform.tolist(),
            "sigma_minus": hyper.sigma_minus.tolist(),
            "sigma_plus": hyper.sigma_plus.tolist(),
            "fixed": hyper.fixed,
        },
        "mlik_integration": fit.mlik_integration,
        "mlik_gaussian": fit.mlik_gaussian,
        "n_outer_iter": fit.n_outer_iter,
        "seconds": fit.seconds,
        "fixed_omega": fit.fixed_omega,
        "points": points,
    }
    write_atomic(directory / FIT_FILE, json.dumps(document, indent=2))
    written.append(directory / FIT_FILE)
    logger.info(f"Fit archive written to {directory} ({len(points)} integration points)")
    return written


def load_fit(directory) -> FitResult:
    """
    Rebuild a FitResult from an archive.

    Raises:
        ArchiveError: missing files, unknown format version or a layout mismatch
    """
    directory = Path(directory)
    if not (directory / FIT_FILE).exists() or not (directory / CONFIG_FILE).exists():
        raise ArchiveError(f"Not a fit archive: {directory}")
    try:
        document = json.loads((directory / FIT_FILE).read_text(encoding="utf-8"))
        config_text = (directory / CONFIG_FILE).read_text(encoding="utf-8")
    except (OSError, json.JSONDecodeError) as e:
        raise ArchiveError(f"Unreadable fit archive {directory}: {e}")
    if document.get("format_version") != _format_version():
        raise ArchiveError(f"Unsupported archive format version {document.get('format_version')}")

    long_data = pd.read_csv(directory / LONG_FILE) if (directory / LONG_FILE).exists() else None
    surv_data = pd.read_csv(directory / SURV_FILE) if (directory / SURV_FILE).exists() else None
    model = assemble(parse_config(config_text, long_data, surv_data))
    if model.hyper.names != document["hyper_names"] or model.n_latent != len(document["latent_names"]):
        raise ArchiveError("Archive layout does not match the re-assembled model")

    points = []
    for entry in document["points"]:
        try:
            mode = np.load(directory / entry["mode_file"])
            precision = sparse.load_npz(directory / entry["precision_file"]).tocsc()
        except OSError as e:
            raise ArchiveError(f"Missing archive array: {e}")
        factor = factorize(precision)
        V = W = None
        if model.constraints is not None:
            _, V, W = _project(mode, factor, model.constraints)
        approx = GaussianApprox(
            mode=mode, precision=precision, factor=factor, logdet=factor.logdet(), loglik=entry["loglik"],
            iterations=entry["iterations"], newton_steps=entry["newton_steps"], step_norm=entry["step_norm"],
            constraint_V=V, constraint_W=W, constraints=model.constraints,
        )
        points.append(IntegrationPoint(omega=np.asarray(entry["omega"], dtype=float),
                                       z=np.asarray(entry["z"], dtype=float), weight=float(entry["weight"]),
                                       log_post=float(entry["log_post"]), approx=approx))

    mode = np.asarray(document["mode"], dtype=float)
    hp = document["hyper_posterior"]
    hyper = HyperPosterior(mode=mode, transform=np.asarray(hp["transform"], dtype=float).reshape(mode.size, mode.size),
                           sigma_minus=np.asarray(hp["sigma_minus"], dtype=float),
                           sigma_plus=np.asarray(hp["sigma_plus"], dtype=float), fixed=bool(hp["fixed"]))
    logger.info(f"Loaded fit archive {directory}")
    return FitResult(
        model=model, strategy=IntStrategy(document["strategy"]), mode=mode,
        hessian=np.asarray(document["hessian"], dtype=float).reshape(mode.size, mode.size),
        points=points, marginals=latent_marginals(points), hyper_posterior=hyper,
        mlik_integration=float(document["mlik_integration"]), mlik_gaussian=float(document["mlik_gaussian"]),
        n_outer_iter=int(document["n_outer_iter"]), seconds=float(document["seconds"]),
        fixed_omega=bool(document["fixed_omega"]),
    )


@dataclass
class RunManifest:
    """Provenance of one CLI run"""
    command: str
    version: str
    seed: Optional[int] = None
    strategy: Optional[str] = None
    config_hash: Optional[str] = None
    data_hashes: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def add_inputs(self, config_path=None, data_paths=()) -> None:
        if config_path is not None:
            self.config_hash = sha256_file(config_path)
        for p in data_paths:
            if p is not None:
                self.data_hashes[str(p)] = sha256_file(p)

    def add_outputs(self, paths, root) -> None:
        root = Path(root)
        for p in paths:
            p = Path(p)
            self.outputs[str(p.relative_to(root)) if p.is_relative_to(root) else str(p)] = sha256_file(p)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_FILE
        write_atomic(path, json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, directory) -> "RunManifest":
        path = Path(directory) / MANIFEST_FILE
        try:
            return cls(**json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ArchiveError(f"Unreadable manifest {path}: {e}")

    def verify(self, directory) -> List[str]:
        """Output files that are missing or whose hash changed"""
        root = Path(directory)
        problems = []
        for name, digest in self.outputs.items():
            path = root / name
            if not path.exists():
                problems.append(f"missing: {name}")
            elif sha256_file(path) != digest:
                problems.append(f"hash mismatch: {name}")
        return problems
