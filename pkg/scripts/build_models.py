"""Regenerate the bundled model files in src/metalab/models/.

Model A is the linear point model (attracting and repelling variants).
Model B has two attracting points at -1 and +1 driven by a holomorphic
noise frame; the drift coefficients set the exponents. Model C is the
repelling linear point model with tight confinement. The triangle model
places three equivalent attracting points on the unit circle.

Usage: python scripts/build_models.py [output_dir]
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from metalab.model import linear_point_model
from metalab.wells import holomorphic_wells

OUT = Path(__file__).resolve().parents[1] / "src" / "metalab" / "models"


def all_models():
    out = {
        "model_a": linear_point_model(-0.5, 1.0, 1.0, 0.1, (2.0, 2.0), name="model_a"),
        "model_a_repelling": linear_point_model(0.5, 1.0, 1.0, 0.1, (2.0, 2.0), name="model_a_repelling"),
        "model_c": linear_point_model(0.5, 1.0, 1.0, 1.0, (1.0, 2.0), name="model_c"),
        "model_b": holomorphic_wells(np.array([-1.0 + 0j, 1.0 + 0j]), [2.0, 1.0], name="model_b"),
        "model_b_sym": holomorphic_wells(np.array([-1.0 + 0j, 1.0 + 0j]), [1.5, 1.5], name="model_b_sym"),
        "triangle": holomorphic_wells(np.exp(2j * np.pi * np.arange(3) / 3), [1.5, 1.5, 1.5], radius=0.8,
                                      name="triangle"),
    }
    return out


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    out_dir = Path(argv[0]) if argv else OUT
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, model in all_models().items():
        doc = model.to_dict()
        path = out_dir / f"{name}.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
