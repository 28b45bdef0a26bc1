"""Headless driver: project management, scripted replay, tree rendering,
metrics reports, and the HTTP service entry point."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
import click

from . import errors
from .config import load_config
from .engine import Engine
from .model import ProjectState
from .script import EngineClient, render_summary, run_script


def render_tree(state: ProjectState) -> str:
    """Deterministic indented listing; one line per visible node."""
    if state.root_id is None:
        return "(empty project)"
    lines: list[str] = []

    def walk(node_id: str, depth: int) -> None:
        node = state.nodes[node_id]
        total_candidates = sum(len(b.asset_ids) for b in node.candidates)
        parts = [f"{node.kind.value}/{node.status.value}"]
        text = node.spec.intent_text or node.spec.prompt_text
        if text:
            parts.append(f"\"{text[:48]}\"")
        if node.spec.locked:
            parts.append("(locked)")
        if total_candidates:
            parts.append(f"c={total_candidates}")
        if node.selected:
            parts.append(f"sel={node.selected[0]}.{node.selected[1]}")
        if node.collapsed:
            hidden = len(state.subtree_ids(node_id)) - 1
            parts.append(f"[+{hidden}]")
        lines.append("  " * depth + " ".join(parts))
        if not node.collapsed:
            for child in state.children_of(node_id):
                walk(child.node_id, depth + 1)

    walk(state.root_id, 0)
    return "\n".join(lines)


def _engine(ctx: click.Context) -> Engine:
    if ctx.obj.get("engine") is None:
        engine_cfg, service_cfg = load_config(
            ctx.obj["config_path"],
            data_dir=ctx.obj["data_dir"],
            provider=ctx.obj["provider"],
            registry=ctx.obj["registry"],
        )
        ctx.obj["engine"] = Engine(engine_cfg)
        ctx.obj["service"] = service_cfg
        ctx.call_on_close(ctx.obj["engine"].close)
    return ctx.obj["engine"]


def resolve_script(name: str) -> Path:
    """A path on disk, or the name of a packaged fixture (case1, case2)."""
    path = Path(name)
    if path.exists():
        return path
    packaged = resources.files("treeline.data").joinpath("scripts").joinpath(
        f"{Path(name).stem}.script")
    if packaged.is_file():
        return Path(str(packaged))
    raise click.ClickException(f"no script file or packaged fixture named {name!r}")


@click.group()
@click.option("--data-dir", default=None, help="Project data directory.")
@click.option("--provider", default=None, help="Planning provider: mock or http.")
@click.option("--registry", default=None, help="Workflow registry JSON path.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True),
              help="TOML configuration file.")
@click.pass_context
def main(ctx, data_dir, provider, registry, config_path):
    """Branching generative-media authoring engine."""
    ctx.ensure_object(dict)
    ctx.obj.update(data_dir=data_dir, provider=provider, registry=registry,
                   config_path=config_path, engine=None)


@main.group()
def project():
    """Create, list, and remove projects."""


@project.command("new")
@click.argument("name")
@click.pass_context
def project_new(ctx, name):
    engine = _engine(ctx)
    state = engine.create_project(name)
    click.echo(state.project_id)


@project.command("ls")
@click.pass_context
def project_ls(ctx):
    engine = _engine(ctx)
    for header in engine.list_projects():
        click.echo(f"{header['project_id']}\t{header['name']}")


@project.command("rm")
@click.argument("project_id")
@click.pass_context
def project_rm(ctx, project_id):
    engine = _engine(ctx)
    counts = engine.delete_project(project_id)
    click.echo(f"removed {counts['nodes']} node(s), {counts['assets']} asset(s)")


@main.command("run")
@click.argument("script")
@click.pass_context
def run(ctx, script):
    """Replay an authoring script against a fresh or existing data directory."""
    engine = _engine(ctx)
    path = resolve_script(script)
    try:
        result = run_script(path, EngineClient(engine), echo=click.echo)
    except errors.ScriptParseError as exc:
        raise click.ClickException(f"parse error: {exc.message}")
    except errors.CommandFailed as exc:
        raise click.ClickException(str(exc))
    if result.report:
        click.echo(json.dumps(result.report, indent=2))


@main.command("tree")
@click.argument("project_id")
@click.pass_context
def tree(ctx, project_id):
    engine = _engine(ctx)
    click.echo(render_tree(engine.state(project_id)))


@main.command("metrics")
@click.argument("project_id")
@click.option("--overlap", type=click.Choice(["union", "sum"]), default="union",
              help="Aggregation rule for overlapping generation waits.")
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of the table.")
@click.pass_context
def metrics(ctx, project_id, overlap, as_json):
    engine = _engine(ctx)
    report = engine.metrics_report(project_id, overlap=overlap)
    if as_json:
        click.echo(json.dumps(report.to_json_dict(), indent=2))
    else:
        click.echo(report.to_text_table())


@main.command("export")
@click.argument("project_id")
@click.argument("output_name")
@click.pass_context
def export(ctx, project_id, output_name):
    engine = _engine(ctx)
    result = engine.export(project_id, output_name)
    click.echo(str(result.manifest_path))


@main.command("summary")
@click.argument("project_id")
@click.pass_context
def summary(ctx, project_id):
    """One-line shape summary of a project tree."""
    engine = _engine(ctx)
    from .script import ScriptRunner
    runner = ScriptRunner(EngineClient(engine))
    runner.project_id = project_id
    click.echo(render_summary(runner.summarize()))


@main.command("serve")
@click.option("--listen", default=None, help="host:port to bind.")
@click.option("--static-dir", default=None, help="Built frontend bundle directory.")
@click.pass_context
def serve_cmd(ctx, listen, static_dir):
    """Run the HTTP service (single instance per data directory)."""
    engine = _engine(ctx)
    service = ctx.obj["service"]
    if listen:
        service.listen = listen
    from .api import serve
    click.echo(f"listening on {service.listen}", err=True)
    serve(engine, host=service.host, port=service.port,
          static_dir=static_dir or service.static_dir,
          cors_allow=service.cors_allow)


if __name__ == "__main__":
    main()
