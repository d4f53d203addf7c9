"""Export CLI: images/texts to embedding indexes, videos to feature manifests."""

from __future__ import annotations

import json
from pathlib import Path

import click

from .export import discover_images, export_embeddings, export_video_features


@click.group()
def main() -> None:
    """Produce engine-format embeddings and video features."""


@main.command()
@click.option("--in", "input_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of images; subdirectory names become scene ids.")
@click.option("--texts", "texts_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Optional file with one phrase per line.")
@click.option("--out", required=True, help="Output directory for the embedding index.")
def embeddings(input_dir: str, texts_path: str | None, out: str) -> None:
    """Export unit-norm image/text embeddings plus index.json."""
    phrases = []
    if texts_path:
        phrases = [l.strip() for l in Path(texts_path).read_text(encoding="utf-8").splitlines()
                   if l.strip()]
    try:
        result = export_embeddings(discover_images(input_dir), phrases, out)
    except (ValueError, OSError, AssertionError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps(result, indent=2, sort_keys=True))


@main.command()
@click.option("--in", "inputs", required=True, multiple=True,
              type=click.Path(exists=True),
              help="Video file or frames directory; repeatable.")
@click.option("--out", required=True)
@click.option("--crops", default=1, show_default=True, type=click.Choice(["1", "10"]))
@click.option("--label", default="normal", show_default=True,
              type=click.Choice(["normal", "abnormal"]))
@click.option("--domain", default="real", show_default=True,
              type=click.Choice(["real", "pseudo"]))
@click.option("--scene", default="", help="Scene id recorded in the manifest.")
def features(inputs: tuple[str, ...], out: str, crops: str, label: str, domain: str,
             scene: str) -> None:
    """Export TxD segment features and a dataset manifest."""
    sources = [(Path(p).stem, Path(p)) for p in inputs]
    try:
        result = export_video_features(sources, out, crops=int(crops), label=label,
                                       domain=domain, scene_id=scene)
    except (ValueError, OSError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
