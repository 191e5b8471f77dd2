"""Evaluation report rendering and template validation."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Optional

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateSyntaxError

from .infer import EvaluationReport

REPORT_TEMPLATE = "eval_report.md.j2"


def builtin_template_dir() -> Path:
    return Path(__file__).resolve().parent / "builtin_templates"


def validate_template(template_path: Path) -> None:
    if not template_path.exists():
        raise FileNotFoundError(f"Template file not found: {template_path}")

    env = Environment(loader=FileSystemLoader(str(template_path.parent)))
    try:
        env.get_template(template_path.name)
    except TemplateSyntaxError as exc:
        raise ValueError(f"Invalid template syntax in {template_path}: {exc}") from exc


def render_report(
    report: EvaluationReport,
    context: Mapping[str, Any],
    template_path: Optional[Path] = None,
) -> str:
    """Markdown summary of an evaluation; `context` carries seed, config hash and policy name."""
    path = template_path or builtin_template_dir() / REPORT_TEMPLATE
    validate_template(path)
    env = Environment(
        loader=FileSystemLoader(str(path.parent)),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    template = env.get_template(path.name)
    return template.render(metrics=report.metrics, rows=report.rows, **context)
