"""
Command-line interface.

Every subcommand works on a directory of artifacts with fixed names, so the
stages chain without repeating paths::

    cwf simulate --snr 1/20 --n 5000 --L 64 --groups 10 --seed 7
    cwf denoise --method cwf
    cwf classify
    cwf evaluate

Settings are resolved in increasing precedence: built-in defaults, a
``key = value`` file given by ``--config``, ``CWF_<KEY>`` environment
variables, command-line flags.
"""

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import io as cio
from .covariance import EstimatorConfig, GroupStatistics, estimate_covariance
from .denoise import classify_outliers, denoise_phaseflip, denoise_twf, estimate_contrast
from .fb import FbCoeffs, build_basis, forward, noise_covariance_blocks
from .imaging import DimensionError, DomainError, ImageStack, UndefinedMetricError, mean_relative_mse
from .noise import PSD_FLOOR, whiten_stack
from .pipeline import ctf_blocks_for, estimate_noise, run_cwf, whitening_blocks_for
from .simulate import SimulationSpec, simulate

logger = logging.getLogger("cwf")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_INPUT = 5
EXIT_NUMERIC = 6

STACK, CLEAN, CTF, ASSIGN, TRUTH = "stack.mrc", "clean.mrc", "ctf.csv", "assignments.csv", "truth.json"
MEAN, COVARIANCE, LABELS = "mean.mrc", "covariance.npz", "labels.csv"
METHODS = ("cwf", "twf", "phaseflip")


class ConfigError(ValueError):
    """Raised for unknown keys or unparsable values."""


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fraction(text):
    return float(Fraction(str(text).strip()))


def _choice(*allowed):
    def parse(text):
        if text not in allowed:
            raise ValueError(f"{text!r} is not one of {', '.join(allowed)}")
        return text

    return parse


def _ssnr(text):
    return "estimate" if str(text).strip() == "estimate" else _fraction(text)


def _optional_float(text):
    return None if text in (None, "", "auto") else float(text)


_SIM = ("simulate",)
_EST = ("estimate-cov", "denoise")

# key: (parser, default, help, subcommands)
OPTIONS = {
    "workdir": (str, ".", "directory holding the artifacts of every stage", None),
    "log_level": (str, "INFO", "logging level", None),
    # simulation
    "n": (int, 1000, "number of images", _SIM),
    "L": (int, 64, "image side in pixels (even)", _SIM),
    "snr": (_fraction, 1 / 20, "dataset SNR, e.g. 1/20", _SIM),
    "groups": (int, 10, "number of defocus groups", _SIM),
    "seed": (int, 0, "random seed", _SIM),
    "defocus_min": (float, 1.0, "smallest defocus (um)", _SIM),
    "defocus_max": (float, 4.0, "largest defocus (um)", _SIM),
    "pixel_size": (float, 5.0, "pixel size (Angstrom)", _SIM),
    "voltage": (float, 300.0, "voltage (kV)", _SIM),
    "cs": (float, 2.0, "spherical aberration (mm)", _SIM),
    "amplitude_contrast": (float, 0.07, "amplitude contrast fraction", _SIM),
    "b_factor": (float, 10.0, "B-factor (Angstrom^2)", _SIM),
    "contrast_min": (float, 1.0, "smallest per-image contrast", _SIM),
    "contrast_max": (float, 1.0, "largest per-image contrast", _SIM),
    "outlier_fraction": (float, 0.0, "fraction of images replaced by pure noise", _SIM),
    "noise_unit": (
        _choice("radians_per_pixel", "cycles_per_image", "cycles_per_pixel"),
        "radians_per_pixel",
        "frequency unit of k in the colored response 1/sqrt(1+k^2)",
        _SIM,
    ),
    # simulation noise kind and assumed noise model of the estimators
    "noise": (_choice("white", "colored"), "white", "noise kind", _SIM + _EST),
    # estimation
    "particle_radius": (_optional_float, None, "signal disk radius for noise estimation (default 0.4 L)", _EST),
    "psd_refine": (int, 1, "prewhitening passes of the PSD estimate", _EST),
    "psd_floor": (float, PSD_FLOOR, "relative floor of the PSD estimate", _EST),
    "c": (float, 0.5, "band limit (cycles/pixel)", _EST),
    "lam": (float, 1.0, "ridge parameter of the mean estimate", _EST),
    "cg_tol": (float, 1e-8, "relative CG residual tolerance", _EST),
    "cg_max_iter": (int, 200, "CG iteration cap", _EST),
    "cg_method": (_choice("cg", "cr"), "cg", "Krylov method for the covariance system", _EST),
    "shrinkage": (_bool, True, "eigenvalue shrinkage", _EST),
    "rank_alpha": (float, 0.01, "false-alarm level of the rank test", _EST),
    "null_tol": (float, 1e-10, "relative null-space tolerance of the noise normalization", _EST),
    "invariant_mean": (_bool, True, "rotation-invariant mean (k = 0 block only)", _EST),
    "batch": (int, 2000, "images per transform batch", _EST),
    # denoising
    "method": (_choice(*METHODS), "cwf", "restoration method", ("denoise",)),
    "ssnr": (_ssnr, 1.0, "TWF spectral SNR, or 'estimate'", ("denoise",)),
    "montage_rows": (int, 8, "images per montage column", ("denoise",)),
    # classification
    "denoised": (str, None, "denoised stack (default denoised_cwf.mrc)", ("classify",)),
    "threshold": (float, 0.95, "contrast threshold; lower scores are outliers", ("classify",)),
    "contrast_radius": (_optional_float, None, "disk radius of the contrast score (default L/2)", ("classify",)),
    "normalize": (_choice("mean", "median"), "mean", "contrast normalizer", ("classify",)),
    # evaluation
    "estimate": (str, None, "estimated stack (default denoised_cwf.mrc)", ("evaluate",)),
    "reference": (str, None, "reference stack (default clean.mrc)", ("evaluate",)),
}

_CANONICAL = {k.lower(): k for k in OPTIONS}


def _canonical(key, source):
    k = _CANONICAL.get(key.strip().replace("-", "_").lower())
    if k is None:
        raise ConfigError(f"{source}: unknown setting {key!r}")
    return k


def _parse_value(key, text, source):
    try:
        return OPTIONS[key][0](text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: bad value for {key}: {exc}") from None


def resolve_settings(cli_values, config_path=None, environ_prefix="CWF_"):
    """
    Merge defaults, config file, environment and flags (later wins).

    :param cli_values: Mapping of explicitly given flags.
    :return: ``(settings, sources)`` dicts keyed by canonical setting names.
    """
    settings = {k: v[1] for k, v in OPTIONS.items()}
    sources = {k: "default" for k in OPTIONS}
    if config_path:
        for key, text in cio.read_config(config_path).items():
            k = _canonical(key, str(config_path))
            settings[k], sources[k] = _parse_value(k, text, str(config_path)), "file"
    for key, text in cio.env_config(environ_prefix).items():
        k = _CANONICAL.get(key)
        if k is None:
            logger.debug("ignoring environment variable %s%s", environ_prefix, key.upper())
            continue
        settings[k], sources[k] = _parse_value(k, text, f"${environ_prefix}{key.upper()}"), "env"
    for k, v in cli_values.items():
        settings[k], sources[k] = _parse_value(k, v, "command line") if isinstance(v, str) else v, "cli"
    return settings, sources


class _Outputs:
    """Paths written by the running command; removed again if it fails."""

    def __init__(self, workdir):
        self.workdir = Path(workdir)
        self.paths = []

    def path(self, name):
        p = self.workdir / name
        self.paths.append(p)
        return p

    def remove(self):
        for p in self.paths:
            if p.exists():
                p.unlink()
                logger.info("removed partial output %s", p)


class _Run:
    def __init__(self, command, settings, workdir):
        self.command = command
        self.settings = settings
        self.out = _Outputs(workdir)
        self.timings = {}
        self.stage = "setup"

    @contextmanager
    def timed(self, stage):
        self.stage = stage
        t = time.perf_counter()
        yield
        self.timings[stage] = time.perf_counter() - t
        logger.info("%s: stage %s took %.2f s", self.command, stage, self.timings[stage])

    def report(self, name, body):
        body = dict(body, command=self.command, timings=self.timings, settings=self.settings)
        cio.write_report(body, self.out.path(name))


def _input(workdir, name):
    p = Path(workdir) / name
    if not p.exists():
        raise FileNotFoundError(f"missing input {p}")
    return p


def _load_dataset(workdir):
    stack = cio.read_stack(_input(workdir, STACK))
    params = cio.read_ctf_table(_input(workdir, CTF), stack.pixel_size)
    gid = cio.read_assignments(_input(workdir, ASSIGN), stack.n)
    if gid.max() >= len(params):
        raise DomainError(f"assignment refers to group {gid.max()} but the CTF table has {len(params)} groups")
    return ImageStack(stack.data, stack.pixel_size, gid), params


def _estimator_config(s):
    return EstimatorConfig(
        lam=s["lam"], cg_tol=s["cg_tol"], cg_max_iter=s["cg_max_iter"], shrinkage=s["shrinkage"],
        invariant_mean=s["invariant_mean"], rank_alpha=s["rank_alpha"], null_tol=s["null_tol"],
        cg_method=s["cg_method"],
    )


def _noise_model(stack, s):
    pr = s["particle_radius"] or 0.4 * stack.L
    if s["noise"] == "colored":
        return estimate_noise(stack, pr, "colored", refine=s["psd_refine"], floor=s["psd_floor"])
    return estimate_noise(stack, pr, "white")


def _stored(path):
    """Reread a written stack so metrics match what later stages see."""
    return cio.read_stack(path).data


def cmd_simulate(run):
    s = run.settings
    spec = SimulationSpec(
        n=s["n"], L=s["L"], snr=s["snr"], n_groups=s["groups"], defocus_range=(s["defocus_min"], s["defocus_max"]),
        noise_kind=s["noise"], noise_frequency_unit=s["noise_unit"],
        contrast_range=(s["contrast_min"], s["contrast_max"]), outlier_fraction=s["outlier_fraction"],
        seed=s["seed"], pixel_size=s["pixel_size"], voltage=s["voltage"], spherical_aberration=s["cs"],
        amplitude_contrast=s["amplitude_contrast"], b_factor=s["b_factor"],
    )
    with run.timed("simulate"):
        noisy, truth = simulate(spec)
    with run.timed("write"):
        cio.write_stack(noisy, run.out.path(STACK))
        cio.write_stack(truth.clean, run.out.path(CLEAN), spec.pixel_size)
        cio.write_ctf_table(truth.ctf_params, run.out.path(CTF))
        cio.write_assignments(truth.group_id, run.out.path(ASSIGN))
        run.out.path(TRUTH).write_text(json.dumps(cio.to_jsonable({
            "noise_variance": truth.noise_variance, "snr": truth.snr, "noise": spec.noise_kind,
            "contrast": truth.contrast, "outlier": truth.outlier.astype(int),
        })))
    run.report("report_simulate.json", {"n": spec.n, "L": spec.L, "noise_variance": truth.noise_variance, "snr": truth.snr})
    return {"n": spec.n, "L": spec.L, "sigma2": truth.noise_variance}


def cmd_estimate_cov(run):
    s = run.settings
    with run.timed("read"):
        stack, params = _load_dataset(run.out.workdir)
    with run.timed("noise"):
        noise = _noise_model(stack, s)
        basis = build_basis(stack.L, s["c"])
        data, Winv = stack, None
        if noise.kind == "colored":
            data = whiten_stack(stack, noise.whitening_radial)
            _, Winv = whitening_blocks_for(basis, noise)
    with run.timed("fb_transform"):
        b = s["batch"]
        coeffs = FbCoeffs.concatenate(forward(basis, data.data[i : i + b]) for i in range(0, stack.n, b))
    with run.timed("covariance"):
        ctf_blocks = ctf_blocks_for(basis, params)
        stats = GroupStatistics.from_coeffs(coeffs, stack.group_id, len(params))
        cov, mean = estimate_covariance(
            stats, ctf_blocks, noise.sigma2, _estimator_config(s), noise_covariance_blocks(basis), unwhiten=Winv
        )
    with run.timed("write"):
        arrays = {f"cov_{k}": c for k, c in enumerate(cov.blocks)}
        arrays.update({f"mean_{k}": m for k, m in enumerate(mean.blocks)})
        with open(run.out.path(COVARIANCE), "wb") as fh:
            np.savez(fh, **arrays)
    body = {
        "retained_eigenvalues": cov.retained_eigs,
        "blocks": [d.as_dict() for d in cov.diagnostics],
        "noise_kind": noise.kind,
        "sigma2": noise.sigma2,
    }
    run.report("report_estimate-cov.json", body)
    return {"retained_eigenvalues": cov.retained_eigs}


def _clean_reference(workdir):
    p = Path(workdir) / CLEAN
    return _stored(p) if p.exists() else None


def cmd_denoise(run):
    s = run.settings
    method = s["method"]
    with run.timed("read"):
        stack, params = _load_dataset(run.out.workdir)
    body = {"method": method}
    mean_image = None
    if method == "cwf":
        with run.timed("cwf"):
            res = run_cwf(
                stack, params, noise=_noise_model(stack, s), config=_estimator_config(s), c=s["c"], batch=s["batch"]
            )
        run.timings.update({f"cwf.{k}": v for k, v in res.timings.items()})
        out, mean_image = res.denoised, res.mean_image
        body.update(retained_eigenvalues=res.covariance.retained_eigs, blocks=res.diagnostics, noise_kind=res.noise.kind)
    elif method == "twf":
        with run.timed("twf"):
            sigma2 = None
            if s["ssnr"] == "estimate":
                sigma2 = _noise_model(stack, dict(s, noise="white")).sigma2
            out = denoise_twf(stack, params, s["ssnr"], noise_variance=sigma2)
    else:
        with run.timed("phaseflip"):
            out = denoise_phaseflip(stack, params)
    with run.timed("write"):
        path = run.out.path(f"denoised_{method}.mrc")
        cio.write_stack(out, path)
        if mean_image is not None:
            cio.write_stack(mean_image[None], run.out.path(MEAN), stack.pixel_size)
        clean = _clean_reference(run.out.workdir)
        columns = [stack.data, out.data]
        if clean is not None:
            body["relative_mse_images"] = mean_relative_mse(_stored(path), clean)
            columns = [clean] + columns
        if method == "cwf":
            columns.insert(-1, denoise_twf(stack, params, 1.0).data)
        cio.write_montage(columns, run.out.path(f"montage_{method}.png"), rows=s["montage_rows"])
    run.report(f"report_denoise_{method}.json", body)
    return {k: body[k] for k in ("relative_mse_images", "retained_eigenvalues") if k in body}


def _truth(workdir):
    p = Path(workdir) / TRUTH
    return json.loads(p.read_text()) if p.exists() else None


def cmd_classify(run):
    s = run.settings
    wd = run.out.workdir
    with run.timed("read"):
        den = cio.read_stack(s["denoised"] or _input(wd, "denoised_cwf.mrc"))
        ref = cio.read_stack(_input(wd, MEAN)).data[0] if s["normalize"] == "mean" else None
    with run.timed("classify"):
        radius = s["contrast_radius"] or den.L / 2
        scores = estimate_contrast(den, radius, reference=ref)
        labels = classify_outliers(scores, s["threshold"])
    with run.timed("write"):
        with open(run.out.path(LABELS), "w") as fh:
            fh.write("image_index,contrast,outlier\n")
            for i, (c, o) in enumerate(zip(scores, labels)):
                fh.write(f"{i},{c!r},{int(o)}\n")
    body = {"n": int(den.n), "n_outliers": int(labels.sum()), "threshold": s["threshold"], "radius": radius}
    truth = _truth(wd)
    if truth is not None:
        actual = np.asarray(truth["outlier"], dtype=bool)
        if actual.size == den.n and actual.any():
            body["outlier_recall"] = float(labels[actual].mean())
            body["inlier_loss"] = float(labels[~actual].mean()) if (~actual).any() else float("nan")
    run.report("report_classify.json", body)
    return {k: body[k] for k in ("n_outliers", "outlier_recall", "inlier_loss") if k in body}


def cmd_evaluate(run):
    s = run.settings
    wd = run.out.workdir
    with run.timed("read"):
        est = cio.read_stack(s["estimate"] or _input(wd, "denoised_cwf.mrc")).data
        ref = cio.read_stack(s["reference"] or _input(wd, CLEAN)).data
    with run.timed("metrics"):
        if est.shape != ref.shape:
            raise DimensionError(f"estimate {est.shape} and reference {ref.shape} differ in shape")
        scored = int(np.sum(np.any(ref != 0, axis=(1, 2))))
        body = {"relative_mse_images": mean_relative_mse(est, ref), "n": int(est.shape[0]), "n_scored": scored}
    run.report("report_evaluate.json", body)
    return body


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate-cov": cmd_estimate_cov,
    "denoise": cmd_denoise,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cwf", description="Covariance Wiener filtering for cryo-EM images.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value settings file")
        for key, (_, default, help_text, commands) in OPTIONS.items():
            if commands is None or name in commands:
                p.add_argument(f"--{key.replace('_', '-')}", dest=key, help=f"{help_text} (default: {default})")
    return parser


def exit_code_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (cio.FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ArithmeticError, UndefinedMetricError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DomainError, DimensionError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def main(argv=None):
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    run = None
    try:
        settings, _ = resolve_settings(args, config_path)
        logging.basicConfig(
            level=getattr(logging, str(settings["log_level"]).upper(), logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        workdir = Path(settings["workdir"])
        if command == "simulate":
            workdir.mkdir(parents=True, exist_ok=True)
        elif not workdir.is_dir():
            raise FileNotFoundError(f"work directory {workdir} does not exist")
        run = _Run(command, settings, workdir)
        summary = COMMANDS[command](run)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        stage = run.stage if run else "configuration"
        if run:
            run.out.remove()
        code = exit_code_for(exc)
        print(f"cwf {command}: stage '{stage}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            logger.exception("unexpected failure")
        return code
    print(json.dumps(cio.to_jsonable(summary), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
