"""Command-line client for the occupancy toolkit service.

Every subcommand talks to the HTTP API.  By default an in-process
application instance is used (no socket, fully deterministic); pass
--server to target a running `hiocc serve` instead.  Exit codes:
0 success, 1 partial failure (skipped frames, failed files, failed
gradient rows), 2 invalid invocation.
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

import click
import httpx

from .config import RunConfig, load_config


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise click.UsageError(f"bad dims {text!r}; expected X,Y,Z")
    if len(parts) != 3:
        raise click.UsageError(f"bad dims {text!r}; expected X,Y,Z")
    return parts


def _post_in_process(path: str, payload: dict) -> httpx.Response:
    # ASGITransport is async-only, so the in-process call runs the app
    # under a private event loop; no socket is ever opened.
    from .service.app import create_app

    async def go() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://hiocc.local", timeout=600.0
        ) as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _post(server: str | None, path: str, payload: dict) -> dict:
    try:
        if server:
            with httpx.Client(base_url=server, timeout=600.0) as client:
                resp = client.post(path, json=payload)
        else:
            resp = _post_in_process(path, payload)
    except httpx.HTTPError as e:
        click.echo(f"error: cannot reach service: {e}", err=True)
        sys.exit(2)
    if resp.status_code == 422:
        click.echo(f"error: invalid request: {resp.text}", err=True)
        sys.exit(2)
    if resp.status_code == 400:
        click.echo(f"error: {resp.json().get('detail', resp.text)}", err=True)
        sys.exit(2)
    if resp.status_code != 200:
        click.echo(f"error: service returned {resp.status_code}", err=True)
        sys.exit(1)
    return resp.json()


def _maybe_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_config(path)
    except (OSError, ValueError) as e:
        raise click.UsageError(f"bad config {path}: {e}")


@click.group()
@click.option("--server", default=None, help="Base URL of a running service; defaults to in-process execution.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Hierarchical semantic occupancy toolkit."""
    ctx.obj = {"server": server}


@main.command()
@click.option("--data-dir", required=True, type=click.Path(), help="Directory of .label (and optional .invalid) frames.")
@click.option("--level", default=2, show_default=True, help="Pyramid levels to analyze.")
@click.option("--dims", default="256,256,32", show_default=True, help="Full-resolution grid dims X,Y,Z.")
@click.option("--voxel-size", default=0.2, show_default=True)
@click.option("--config", "config_path", default=None, type=click.Path(), help="Config file supplying the remap path.")
@click.option("--workers", default=1, show_default=True)
@click.option("--out", default=None, type=click.Path(), help="Write the CSV here instead of stdout.")
@click.pass_context
def stats(ctx, data_dir, level, dims, voxel_size, config_path, workers, out):
    """Homogeneity statistics of ground-truth frames (CSV)."""
    cfg = _maybe_config(config_path)
    data = _post(
        ctx.obj["server"],
        "/stats",
        {
            "data_dir": str(Path(data_dir).absolute()),
            "levels": level,
            "dims": _parse_dims(dims),
            "voxel_size": voxel_size,
            "remap_path": cfg.remap_path,
            "workers": workers,
        },
    )
    if out:
        Path(out).write_text(data["csv_text"])
        click.echo(f"wrote {out}")
    else:
        click.echo(data["csv_text"], nl=False)
    for failure in data["failures"]:
        click.echo(f"failed: {failure['frame']}: {failure['error']}", err=True)
    sys.exit(0 if data["status"] == "ok" else 1)


@main.command(name="eval")
@click.option("--pred-dir", required=True, type=click.Path())
@click.option("--gt-dir", required=True, type=click.Path())
@click.option("--dims", default=None, help="Grid dims X,Y,Z; defaults to the config grid.")
@click.option("--config", "config_path", default=None, type=click.Path(), help="Config supplying dims/classes; its presence switches to training-id volumes.")
@click.option("--workers", default=1, show_default=True)
@click.option("--out", default=None, type=click.Path(), help="Write the JSON report here.")
@click.pass_context
def eval_cmd(ctx, pred_dir, gt_dir, dims, config_path, workers, out):
    """SSC metrics of predicted volumes against ground truth.

    Without --config, volumes are raw SemanticKITTI ids passed through
    the packaged remap.  With --config, volumes are assumed to already
    hold training ids (as written by `demo`) with the config's class
    count and grid.
    """
    cfg = _maybe_config(config_path)
    payload = {
        "pred_dir": str(Path(pred_dir).absolute()),
        "gt_dir": str(Path(gt_dir).absolute()),
        "dims": _parse_dims(dims) if dims else list(cfg.grid.dims),
        "voxel_size": cfg.grid.voxel_size,
        "workers": workers,
    }
    if config_path is None:
        payload["dims"] = _parse_dims(dims) if dims else (256, 256, 32)
        payload["use_remap"] = True
        payload["remap_path"] = cfg.remap_path
    else:
        payload["use_remap"] = False
        payload["num_classes"] = cfg.num_classes
        payload["class_names"] = cfg.class_names
    data = _post(ctx.obj["server"], "/eval", payload)
    click.echo(data["table"])
    for stem in data["skipped"]:
        click.echo(f"skipped: {stem}: missing prediction", err=True)
    if out:
        Path(out).write_text(
            json.dumps(
                {
                    "metrics": data["metrics"],
                    "frames_evaluated": data["frames_evaluated"],
                    "skipped": data["skipped"],
                },
                indent=2,
            )
        )
        click.echo(f"wrote {out}")
    sys.exit(0 if data["status"] == "ok" else 1)


@main.command()
@click.option("--seed", default=0, show_default=True)
@click.option("--trials", default=100, show_default=True, help="Instances per loss.")
@click.option("--corrupt", default=None, hidden=True, help="Test hook: corrupt this loss's analytic gradient.")
@click.option("--out", default=None, type=click.Path(), help="Write the JSON table here.")
@click.pass_context
def gradcheck(ctx, seed, trials, corrupt, out):
    """Finite-difference check of every analytic loss gradient."""
    data = _post(
        ctx.obj["server"],
        "/gradcheck",
        {"seed": seed, "trials": trials, "corrupt": corrupt},
    )
    width = max(len(r["loss"]) for r in data["rows"])
    for r in data["rows"]:
        verdict = "pass" if r["passed"] else "FAIL"
        click.echo(
            f"{r['loss']:<{width}}  max_rel_err={r['max_rel_err']:.3e}  "
            f"threshold={r['threshold']:.0e}  {verdict}"
        )
    if out:
        Path(out).write_text(json.dumps(data["rows"], indent=2))
        click.echo(f"wrote {out}")
    sys.exit(0 if data["all_passed"] else 1)


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--seed", default=None, type=int, help="Overrides the config seed.")
@click.option("--k", default=None, type=int, help="Overrides the config top-K budget.")
@click.option("--rule", default=None, type=click.Choice(["learned", "entropy"]), help="Overrides the selection rule.")
@click.option("--out", default="demo_out", show_default=True, type=click.Path(), help="Output directory for grids and the summary.")
@click.pass_context
def demo(ctx, config_path, seed, k, rule, out):
    """Synthesize a scene and run the full pipeline end to end."""
    cfg = _maybe_config(config_path)
    data = _post(
        ctx.obj["server"],
        "/demo",
        {
            "config": json.loads(cfg.model_dump_json()),
            "out_dir": str(Path(out).absolute()),
            "seed": seed,
            "k": k,
            "rule": rule,
        },
    )
    click.echo(json.dumps(data["summary"], indent=2))
    sys.exit(0)


@main.command()
@click.option("--k", default=15000, show_default=True, help="Selected coarse voxels.")
@click.option("--dims", default="256,256,32", show_default=True)
@click.option("--channels", default=32, show_default=True)
@click.option("--out", default=None, type=click.Path(), help="Write the JSON report here.")
@click.pass_context
def bench(ctx, k, dims, channels, out):
    """Dense-vs-hierarchical analytic cost report."""
    data = _post(
        ctx.obj["server"],
        "/bench",
        {"k": k, "dims": _parse_dims(dims), "channels": channels},
    )
    report = data["report"]
    click.echo(json.dumps(report, indent=2))
    if out:
        Path(out).write_text(json.dumps(report, indent=2))
        click.echo(f"wrote {out}")
    sys.exit(0)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
