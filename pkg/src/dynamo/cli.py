"""Experiment harness: phantom generation, simulation, reconstruction, reports.

Configs are INI files with the sections documented in the README; bundled
configs (test1_views3, test5, ...) live inside the package and can be named
directly.  Every stage writes into one output directory and records a
manifest with the config hash, seed, and package version.
"""

import argparse
import configparser
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .driver import MethodSpec, mmgks_of, reconstruct
from .flow import rescaled_solve_of, save_flow_csv, save_flow_png, auto_flow_scale
from .mmgks import SolverConfig
from .phantoms import ImageSequence, load_sequence, moving_blocks, pinball, save_pgm, save_sequence
from .tomo import (
    SCHEDULES,
    FanBeamGeometry,
    build_block_operator,
    load_sinogram_binary,
    random_schedule,
    save_sinogram_binary,
    save_sinogram_csv,
    simulate_sinogram,
)


@dataclass
class ExperimentConfig:
    raw: configparser.ConfigParser
    text: str
    name: str

    def get(self, section, key, fallback=None):
        return self.raw.get(section, key, fallback=fallback)

    def getint(self, section, key, fallback=None):
        return self.raw.getint(section, key, fallback=fallback)

    def getfloat(self, section, key, fallback=None):
        return self.raw.getfloat(section, key, fallback=fallback)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def seed(self, override=None) -> int:
        return override if override is not None else self.getint("run", "seed", 0)

    def methods(self):
        tags = self.get("methods", "run", "M,M-OF")
        return [MethodSpec.parse(t) for t in tags.split(",") if t.strip()]

    def phantom(self, seed: int) -> ImageSequence:
        kind = self.get("phantom", "kind", "moving_blocks")
        n_x = self.getint("phantom", "nx", 90)
        n_y = self.getint("phantom", "ny", 90)
        n_t = self.getint("phantom", "nt", 12)
        if kind == "moving_blocks":
            return moving_blocks(n_x, n_y, n_t, seed=seed)
        if kind == "pinball":
            return pinball(n_x, n_y, n_t)
        if kind == "file":
            path = self.get("phantom", "path")
            if path is None:
                raise ValueError("phantom kind 'file' needs a [phantom] path key")
            return load_sequence(path)
        raise ValueError(f"unknown phantom kind {kind!r}")

    def geometry(self, n_x, n_y) -> FanBeamGeometry:
        return FanBeamGeometry.for_grid(
            n_x, n_y, n_rays=self.getint("geometry", "n_rays", 117)
        )

    def schedule(self, n_t: int, seed: int):
        rule = self.get("schedule", "rule", "shifted")
        n_views = self.getint("schedule", "n_views", 3)
        if rule == "random":
            span = self.getfloat("schedule", "span_deg", 360.0)
            return random_schedule(n_views, n_t, seed=seed, span_deg=span)
        if rule not in SCHEDULES:
            raise ValueError(f"unknown schedule rule {rule!r}")
        return SCHEDULES[rule](n_views, n_t)

    def solver(self, seed: int, threads: int, delta: float = 0.0) -> SolverConfig:
        eps_raw = self.get("solver", "eps", "auto")
        flow_scale_raw = self.get("solver", "flow_scale", "auto")
        return SolverConfig(
            ell=self.getint("solver", "subspace_init", 10),
            max_iters=self.getint("solver", "max_iters", 200),
            q=self.getfloat("solver", "q", 1.0),
            p=self.getfloat("solver", "p", 2.0),
            eps=None if eps_raw == "auto" else float(eps_raw),
            lambda_rule=self.get("solver", "lambda_rule", "dp"),
            eta=self.getfloat("solver", "eta", 1.01),
            delta=delta,
            tol=self.getfloat("solver", "tol", 1e-6),
            tau=self.getint("solver", "tau", 20),
            of_start=self.getint("solver", "of_start", 10),
            flow_scale=None if flow_scale_raw == "auto" else float(flow_scale_raw),
            flow_iters=self.getint("solver", "flow_iters", 20),
            flow_delta_r=self.getint("solver", "flow_delta_r", 1),
            seed=seed,
            threads=threads,
        )

    @property
    def encoding(self) -> str:
        return self.get("solver", "encoding", "bilinear")

    def output_frames(self, n_t: int):
        raw = self.get("output", "frames", "")
        if not raw.strip():
            return []
        frames = [int(x) for x in raw.split(",")]
        bad = [t for t in frames if not 1 <= t <= n_t]
        if bad:
            raise ValueError(f"[output] frames {bad} outside 1..{n_t}")
        return frames


def load_config(spec: str) -> ExperimentConfig:
    path = Path(spec)
    if path.exists():
        text = path.read_text()
        name = path.stem
    else:
        ref = resources.files("dynamo").joinpath(f"configs/{spec}.cfg")
        if not ref.is_file():
            raise FileNotFoundError(
                f"config {spec!r}: no such file and no bundled config of that name"
            )
        text = ref.read_text()
        name = spec
    parser = configparser.ConfigParser()
    parser.read_string(text)
    return ExperimentConfig(parser, text, name)


def _update_manifest(outdir: Path, cfg: ExperimentConfig, seed: int, **extra):
    path = outdir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(
        {"config": cfg.name, "config_hash": cfg.config_hash, "seed": seed,
         "version": __version__}
    )
    manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_manifest(outdir: Path) -> dict:
    path = outdir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(
            f"{path}: missing manifest; run the earlier pipeline stages first"
        )
    return json.loads(path.read_text())


def cmd_phantom(cfg: ExperimentConfig, outdir: Path, seed: int, threads: int) -> None:
    seq = cfg.phantom(seed)
    outdir.mkdir(parents=True, exist_ok=True)
    save_sequence(seq, outdir / "ground_truth.dynu")
    lo, hi = float(seq.data.min()), float(seq.data.max())
    for t in cfg.output_frames(seq.n_t):
        save_pgm(seq.frame(t - 1), outdir / f"ground_truth_t{t:03d}.pgm", lo, hi)
    _update_manifest(outdir, cfg, seed, phantom={"nx": seq.n_x, "ny": seq.n_y, "nt": seq.n_t})
    print(f"wrote {outdir / 'ground_truth.dynu'} ({seq.n_x}x{seq.n_y}x{seq.n_t})")


def cmd_simulate(cfg: ExperimentConfig, outdir: Path, seed: int, threads: int) -> None:
    truth_path = outdir / "ground_truth.dynu"
    if not truth_path.exists():
        raise FileNotFoundError(f"{truth_path}: run 'dynamo phantom' first")
    seq = load_sequence(truth_path)
    geom = cfg.geometry(seq.n_x, seq.n_y)
    sched = cfg.schedule(seq.n_t, seed)
    data = simulate_sinogram(
        geom,
        sched,
        seq,
        noise_level=cfg.getfloat("noise", "level", 0.1),
        seed=seed,
        jitter_deg=cfg.getfloat("noise", "jitter_deg", 0.5),
        model=cfg.get("noise", "sim_model", "siddon"),
    )
    save_sinogram_binary(data, outdir / "sinogram.dynb")
    save_sinogram_csv(data, sched, geom, outdir / "sinogram.csv")
    _update_manifest(outdir, cfg, seed, simulate={"delta": data.delta, "m": int(data.b.size)})
    print(f"wrote {outdir / 'sinogram.dynb'} ({data.b.size} samples, delta={data.delta:.4g})")


def _write_convergence_csv(path: Path, report) -> None:
    with open(path, "w") as fh:
        fh.write("iter,lambda,data_residual,rre,ssim,flow_recomputed\n")
        for k in range(report.iterations):
            fh.write(
                f"{k},{float(report.lam[k])!r},{float(report.data_residual[k])!r},"
                f"{float(report.rre[k])!r},{float(report.ssim[k])!r},"
                f"{int(report.flow_recomputed[k])}\n"
            )


def cmd_reconstruct(cfg: ExperimentConfig, outdir: Path, seed: int, threads: int) -> None:
    truth_path = outdir / "ground_truth.dynu"
    sino_path = outdir / "sinogram.dynb"
    for p in (truth_path, sino_path):
        if not p.exists():
            raise FileNotFoundError(f"{p}: run the phantom/simulate stages first")
    seq = load_sequence(truth_path)
    b, m_t, n_t = load_sinogram_binary(sino_path)
    manifest = _read_manifest(outdir)
    delta = manifest.get("simulate", {}).get("delta", 0.0)

    geom = cfg.geometry(seq.n_x, seq.n_y)
    sched = cfg.schedule(seq.n_t, seed)
    h = build_block_operator(geom, sched)  # reconstruction model: no jitter
    solver = cfg.solver(seed, threads, delta=delta)
    if solver.lambda_rule == "dp" and delta <= 0:
        solver.lambda_rule = "gcv"  # no usable noise estimate

    results = {}
    lo, hi = float(seq.data.min()), float(seq.data.max())
    for method in cfg.methods():
        u, s, sp, report = mmgks_of(
            h, b, solver, method, seq.shape, ground_truth=seq, encoding=cfg.encoding
        )
        _write_convergence_csv(outdir / f"convergence_{method.tag}.csv", report)
        recon = ImageSequence(seq.n_x, seq.n_y, seq.n_t, u)
        for t in cfg.output_frames(seq.n_t):
            frame = recon.frame(t - 1)
            save_pgm(frame, outdir / f"recon_{method.tag}_t{t:03d}.pgm", lo, hi)
            plt.imsave(outdir / f"recon_{method.tag}_t{t:03d}.png", frame,
                       cmap="gray", vmin=lo, vmax=hi)
        for t, field in enumerate(s, start=1):
            save_flow_png(field, outdir / f"flow_{method.tag}_t{t:03d}.png")
        results[method.tag] = {
            "mean_rre": report.mean_rre,
            "mean_ssim": report.mean_ssim,
            "wall_seconds": report.wall_seconds,
            "iterations": report.iterations,
            "stop_reason": report.stop_reason,
        }
        print(
            f"{method.tag}: mean RRE {report.mean_rre:.4f}, mean SSIM "
            f"{report.mean_ssim:.4f} ({report.iterations} iters, "
            f"{report.wall_seconds:.1f}s)"
        )
    (outdir / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    _update_manifest(outdir, cfg, seed, reconstruct={"methods": sorted(results)})


def cmd_flow(cfg: ExperimentConfig, outdir: Path, seed: int, threads: int) -> None:
    src = cfg.get("flow", "input", None) or (outdir / "ground_truth.dynu")
    src = Path(src)
    if not src.exists():
        raise FileNotFoundError(f"{src}: no input sequence for flow estimation")
    seq = load_sequence(src)
    solver = cfg.solver(seed, threads)
    alpha = solver.flow_scale if solver.flow_scale is not None else auto_flow_scale(seq.n_x, seq.n_y)
    outdir.mkdir(parents=True, exist_ok=True)
    for t in range(seq.n_t - 1):
        field = rescaled_solve_of(seq.frame(t), seq.frame(t + 1), alpha, solver)
        save_flow_csv(field, outdir / f"flow_t{t + 1:03d}.csv")
        save_flow_png(field, outdir / f"flow_t{t + 1:03d}.png")
    _update_manifest(outdir, cfg, seed, flow={"pairs": seq.n_t - 1, "alpha": alpha})
    print(f"wrote {seq.n_t - 1} flow fields to {outdir}")


def cmd_report(cfg: ExperimentConfig, outdir: Path, seed: int, threads: int) -> None:
    results_path = outdir / "results.json"
    if not results_path.exists():
        raise FileNotFoundError(f"{results_path}: run 'dynamo reconstruct' first")
    results = json.loads(results_path.read_text())

    with open(outdir / "summary.csv", "w") as fh:
        fh.write("method,mean_rre,mean_ssim,wall_seconds\n")
        for method in cfg.methods():
            row = results.get(method.tag)
            if row is None:
                raise ValueError(f"method {method.tag} missing from results.json")
            fh.write(
                f"{method.tag},{float(row['mean_rre'])!r},"
                f"{float(row['mean_ssim'])!r},{row['wall_seconds']:.2f}\n"
            )

    curves = {}
    for method in cfg.methods():
        path = outdir / f"convergence_{method.tag}.csv"
        if not path.exists():
            raise FileNotFoundError(f"{path}: convergence trace missing")
        rows = path.read_text().splitlines()[1:]
        rre = [float(r.split(",")[3]) for r in rows]
        ssim_vals = [float(r.split(",")[4]) for r in rows]
        curves[method.tag] = (rre, ssim_vals)

    for idx, label in ((0, "rre"), (1, "ssim")):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for tag, series in curves.items():
            ax.plot(series[idx], label=tag)
        ax.set_xlabel("iteration")
        ax.set_ylabel(label.upper())
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(outdir / f"{label}_history.png", dpi=150)
        plt.close(fig)

    table = sorted((r["mean_rre"], tag) for tag, r in results.items())
    print(f"report written to {outdir / 'summary.csv'}")
    for val, tag in table:
        print(f"  {tag:8s} mean RRE {val:.4f}")
    _update_manifest(outdir, cfg, seed, report={"methods": len(curves)})


_COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "flow": cmd_flow,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dynamo",
        description="dynamic tomography reconstruction with optical-flow regularization",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", "-c", required=True,
                        help="config file path or bundled config name")
    parser.add_argument("--out", "-o", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-pair flow solves")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        outdir = Path(args.out) if args.out else Path("runs") / cfg.name
        outdir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        _COMMANDS[args.command](cfg, outdir, cfg.seed(args.seed), args.threads)
        print(f"[{args.command}] done in {time.perf_counter() - start:.1f}s")
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
