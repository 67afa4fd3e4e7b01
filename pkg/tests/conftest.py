import textwrap
from pathlib import Path

import pytest


def write_mini_study(root: Path, ar_targets: str = "{genre-a: 1.0, genre-b: 1.0, genre-c: 1.0, genre-d: 1.0}") -> Path:
    """A four-genre identity-planted study: all log AR exactly zero."""
    (root / "genres.csv").write_text(
        "name,worldwide_audience\n"
        "genre-a,500000\ngenre-b,400000\ngenre-c,300000\ngenre-d,200000\n",
        encoding="utf-8",
    )
    (root / "scenario.yaml").write_text(
        textwrap.dedent(
            f"""
            seed: 5
            interests: [genre-a, genre-b, genre-c, genre-d]
            dest:
              label: dest
              size: 10000
              traits: {{ethnic_affinity: D, home_country: DST}}
              shares: {{genre-a: 0.4, genre-b: 0.3, genre-c: 0.2, genre-d: 0.1}}
            source:
              label: source
              size: 10000
              traits: {{home_country: SRC}}
              shares: {{genre-a: 0.1, genre-b: 0.35, genre-c: 0.15, genre-d: 0.4}}
            expats:
              - label: expat
                size: 10000
                traits: {{ethnic_affinity: E, home_country: DST, expat_origin: SRC}}
                ar_targets: {ar_targets}
            """
        ),
        encoding="utf-8",
    )
    (root / "study.yaml").write_text(
        textwrap.dedent(
            """
            study_id: mini
            seed: 7
            out_dir: out
            catalog: {path: genres.csv, floor: 0}
            percentile: 50
            bootstrap: 200
            backend: {kind: sim, scenario: scenario.yaml}
            populations:
              - {label: expat, ethnic_affinity: E, home_country: DST, expat_origin: SRC}
              - {label: dest, ethnic_affinity: D, home_country: DST}
              - {label: source, home_country: SRC}
            pairs:
              - {expat: expat, dest: dest, source: source}
            """
        ),
        encoding="utf-8",
    )
    return root / "study.yaml"


@pytest.fixture
def mini_study(tmp_path):
    return write_mini_study(tmp_path)
