"""Bundled example data.

* Scottish lip cancer: 56 districts, observed and expected case counts,
  an agriculture/fishing/forestry covariate and the district adjacency
  graph (disease-mapping example).
* Football: one season of league results in long format, two rows per
  played match (attack/defence GLMM example).
"""

import os

import pandas as pd

_HERE = os.path.dirname(os.path.abspath(__file__))

__all__ = ["load_scotland", "scotland_graph_path", "load_football"]


def load_scotland() -> pd.DataFrame:
    """District-level lip cancer counts with expected counts and covariate."""
    return pd.read_csv(os.path.join(_HERE, "scotland.csv"))


def scotland_graph_path() -> str:
    """Path of the district adjacency graph file."""
    return os.path.join(_HERE, "scotland.graph")


def load_football() -> pd.DataFrame:
    """League season in long format: one row per team per played match."""
    return pd.read_csv(os.path.join(_HERE, "football.csv"))
