"""Command-line client for the pipeline service.

Each subcommand assembles a request from (profile defaults < config file <
flags) and posts it to the service; by default that service runs in-process,
so invocations are isolated and deterministic. Set --server or PAVAD_SERVER
to talk to a shared instance instead.

Config files are flat INI: sections [sim], [train], [model] whose keys
mirror the config dataclass fields, e.g.

    [train]
    steps = 300
    lambda1 = 1.0
"""

from __future__ import annotations

import configparser
import json
import sys
from pathlib import Path

import click

from .client import ServiceClient, ServiceError

TRAIN_KEYS = {"steps", "learning_rate", "weight_decay", "batch_videos_per_stream",
              "segment_number", "random_crop", "lambda1", "lambda2", "lambda_da",
              "lambda_dist", "beta", "epsilon", "topk"}
MODEL_KEYS = {"feature_dim", "model_dim", "heads", "slots_abnormal", "slots_normal",
              "tau", "input_scale"}
SIM_KEYS = {"dim", "videos_per_stream", "test_videos_per_class", "rows_per_video",
            "frames_per_row", "normal_mean_norm", "pseudo_norm_scale", "anomaly_fraction",
            "n_abnormal_modes", "mode_skew", "direction_spread", "mode_offset", "norm_jitter"}


def _parse_value(raw: str):
    text = raw.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _read_config(path: str | None) -> dict[str, dict]:
    sections: dict[str, dict] = {"sim": {}, "train": {}, "model": {}}
    if not path:
        return sections
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise click.ClickException(f"cannot read config file {path!r}")
    known = {"sim": SIM_KEYS, "train": TRAIN_KEYS, "model": MODEL_KEYS}
    for section in parser.sections():
        if section not in sections:
            raise click.ClickException(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in known[section]:
                raise click.ClickException(f"unknown key {key!r} in config section [{section}]")
            sections[section][key] = _parse_value(raw)
    return sections


def _merge(base: dict, flags: dict) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _emit(doc: dict) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


def _run(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ServiceError, OSError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc


server_option = click.option("--server", default=None, envvar="PAVAD_SERVER",
                             help="Base URL of a running service; default runs in-process.")
config_option = click.option("--config", "config_path", default=None,
                             type=click.Path(exists=True, dir_okay=False),
                             help="INI config file with [sim]/[train]/[model] sections.")
profile_option = click.option("--profile", default="sim", show_default=True,
                              type=click.Choice(["sht", "ucf", "sim"]))


@click.group()
def main() -> None:
    """Pseudo-anomaly curation, detector training, and evaluation."""


@main.command()
@click.option("--out", required=True, help="Output directory for the dataset.")
@click.option("--seed", default=0, show_default=True, type=int)
@server_option
@config_option
def simulate(out: str, seed: int, server: str | None, config_path: str | None) -> None:
    """Generate a synthetic train/test dataset with the magnitude-bias gap."""
    cfg = _read_config(config_path)
    with ServiceClient(server) as client:
        resp = _run(client.simulate, {"out_dir": out, "seed": seed, "sim": cfg["sim"]})
    _emit(resp)


@main.command()
@click.option("--manifest", required=True, help="Training manifest JSON.")
@click.option("--out", required=True, help="Output directory (checkpoint + loss log).")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--steps", default=None, type=int)
@click.option("--lambda1", default=None, type=float)
@click.option("--lambda2", default=None, type=float)
@click.option("--lambda-da", "lambda_da", default=None, type=float)
@click.option("--lambda-dist", "lambda_dist", default=None, type=float)
@click.option("--beta", default=None, type=float)
@click.option("--tau", default=None, type=float)
@click.option("--topk", default=None, type=int)
@profile_option
@server_option
@config_option
def train(manifest: str, out: str, seed: int, steps, lambda1, lambda2, lambda_da,
          lambda_dist, beta, tau, topk, profile: str, server: str | None,
          config_path: str | None) -> None:
    """Train the detector on a manifest's three streams."""
    cfg = _read_config(config_path)
    train_over = _merge(cfg["train"], {
        "steps": steps, "lambda1": lambda1, "lambda2": lambda2, "lambda_da": lambda_da,
        "lambda_dist": lambda_dist, "beta": beta, "topk": topk,
    })
    model_over = _merge(cfg["model"], {"tau": tau})
    with ServiceClient(server) as client:
        resp = _run(client.train, {
            "manifest": manifest, "out_dir": out, "profile": profile, "seed": seed,
            "train": train_over, "model": model_over,
        })
    _emit(resp)


@main.command("eval")
@click.option("--checkpoint", required=True, help="Checkpoint directory.")
@click.option("--manifest", required=True, help="Evaluation manifest JSON.")
@click.option("--masks", required=True, help="Frame-mask JSON (ground truth).")
@click.option("--out", required=True, help="Output directory (metrics + traces).")
@server_option
def eval_cmd(checkpoint: str, manifest: str, masks: str, out: str, server: str | None) -> None:
    """Score a manifest with a trained checkpoint and report frame-level AUC."""
    with ServiceClient(server) as client:
        resp = _run(client.evaluate, {"checkpoint": checkpoint, "manifest": manifest,
                                      "masks": masks, "out_dir": out})
    _emit(resp)


@main.command()
@click.option("--out", required=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True,
              help="Comma-separated seed list.")
@click.option("--steps", default=None, type=int)
@profile_option
@server_option
@config_option
def ablate(out: str, seeds: str, steps, profile: str, server: str | None,
           config_path: str | None) -> None:
    """Run baseline/full train+eval cycles over fresh simulated data per seed."""
    try:
        seed_list = [int(x) for x in seeds.split(",") if x.strip() != ""]
    except ValueError:
        raise click.ClickException(f"bad --seeds value {seeds!r}")
    cfg = _read_config(config_path)
    train_over = _merge(cfg["train"], {"steps": steps})
    with ServiceClient(server) as client:
        resp = _run(client.ablate, {"out_dir": out, "profile": profile, "seeds": seed_list,
                                    "train": train_over, "sim": cfg["sim"]})
    _emit(resp)


@main.command("grad-check")
@click.option("--n-configs", default=20, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--tol", default=1e-4, show_default=True, type=float)
@profile_option
@server_option
def grad_check(n_configs: int, seed: int, tol: float, profile: str, server: str | None) -> None:
    """Finite-difference suite; exits 0 iff every term meets the tolerance."""
    with ServiceClient(server, timeout=None) as client:
        resp = _run(client.grad_check, {"n_configs": n_configs, "seed": seed, "tol": tol})
    for term, err in sorted(resp["terms"].items()):
        click.echo(f"{term}: max relative error {err:.3e}")
    click.echo(f"max {resp['max_error']:.3e} vs tol {resp['tol']:.0e} -> "
               f"{'PASS' if resp['passed'] else 'FAIL'} ({resp['runtime_s']:.1f}s)")
    if not resp["passed"]:
        sys.exit(1)


@main.command("select-inits")
@click.option("--index", "index_dir", required=True, help="Embedding index directory.")
@click.option("--classes", "classes_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON list of class specs.")
@click.option("--out", required=True)
@click.option("--balance/--no-balance", default=False, show_default=True)
@click.option("--alpha", default=0.5, show_default=True, type=float)
@click.option("--quota", default=0, show_default=True, type=int,
              help="Minimum selections per scene when balancing.")
@click.option("--subsample-scale", default=1.0, show_default=True, type=float)
@server_option
def select_inits(index_dir: str, classes_path: str, out: str, balance: bool, alpha: float,
                 quota: int, subsample_scale: float, server: str | None) -> None:
    """Pick the top-K class-relevant init images per class."""
    classes = json.loads(Path(classes_path).read_text(encoding="utf-8"))
    with ServiceClient(server) as client:
        resp = _run(client.select_inits, {
            "index_dir": index_dir, "classes": classes, "out_dir": out,
            "balance": {"enabled": balance, "alpha": alpha, "min_quota_per_scene": quota,
                        "subsample_scale": subsample_scale},
        })
    _emit(resp)


@main.command("refine-prompts")
@click.option("--selections", "selections_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--classes", "classes_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True)
@click.option("--vlm-timeout-s", default=60.0, show_default=True, type=float)
@click.option("--no-vlm", is_flag=True, default=False,
              help="Skip the endpoint and use the deterministic fallback.")
@click.option("--max-in-flight", default=4, show_default=True, type=int)
@server_option
def refine_prompts_cmd(selections_path: str, classes_path: str, out: str, vlm_timeout_s: float,
                       no_vlm: bool, max_in_flight: int, server: str | None) -> None:
    """Refine per-init prompts via the configured endpoint (fallback offline)."""
    classes = json.loads(Path(classes_path).read_text(encoding="utf-8"))
    with ServiceClient(server, timeout=None) as client:
        resp = _run(client.refine_prompts, {
            "selections_path": selections_path, "classes": classes, "out_dir": out,
            "vlm": {"use_vlm": not no_vlm, "timeout_s": vlm_timeout_s,
                    "max_in_flight": max_in_flight},
        })
    _emit({"n_prompts": len(resp["prompts"]), "n_fallback": resp["n_fallback"],
           "path": resp["path"]})


@main.command("gen-manifest")
@click.option("--selections", "selections_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--prompts", "prompts_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True)
@profile_option
@server_option
def gen_manifest(selections_path: str, prompts_path: str, out: str, profile: str,
                 server: str | None) -> None:
    """Emit one generation job per selected (class, init) pair."""
    with ServiceClient(server) as client:
        resp = _run(client.gen_manifest, {"selections_path": selections_path,
                                          "prompts_path": prompts_path, "out_dir": out,
                                          "profile": profile})
    _emit(resp)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8733, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
