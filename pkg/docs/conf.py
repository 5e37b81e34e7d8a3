# SPDX-FileCopyrightText: 2015 Eric Larson, 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

#
# SkimRead documentation build configuration file.
#
# Only the settings that differ from the Sphinx defaults are listed here.
from __future__ import annotations

import os
import sys

# Make the package importable for autodoc without installing it.
sys.path.insert(0, os.path.abspath(".."))

extensions = ["sphinx.ext.autodoc", "sphinx.ext.todo", "sphinx.ext.viewcode"]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "SkimRead"
copyright = "2023 Frost Ming"

release = "23.3"
version = release

exclude_patterns = ["_build"]
pygments_style = "sphinx"
autodoc_member_order = "bysource"

html_theme = "sphinx_rtd_theme"
htmlhelp_basename = "SkimReaddoc"

man_pages = [("index", "skimread", "SkimRead Documentation", ["Frost Ming"], 1)]
