# Sphinx configuration for the objnerf-lab docs.
import os
import sys

sys.path.insert(0, os.path.abspath("../.."))

project = "objnerf-lab"
author = "objnerf-lab developers"
copyright = f"2022, {author}"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.intersphinx",
    "sphinx.ext.mathjax",
    "autoapi.sphinx",
]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3/", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "torch": ("https://pytorch.org/docs/stable/", None),
}
intersphinx_disabled_domains = ["std"]

# Field, renderer and trainer API pages.
autoapi_modules = {"objnerf": {"prune": True, "override": False}}
autodoc_typehints = "description"
autosummary_generate = True
autosummary_imported_members = False

templates_path = ["_templates"]
html_theme = "sphinx_rtd_theme"
html_title = "objnerf-lab"
