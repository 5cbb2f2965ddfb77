# Configuration file for the Sphinx documentation builder.
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import sphinx_rtd_theme
import os
import sys
sys.path.insert(0, os.path.abspath('.'))


# -- Project information -----------------------------------------------------

project = 'bodycomp'
copyright = '2021, Antonio, Vivek, Jackson'
author = 'Antonio, Vivek, Jackson'


# -- General configuration ---------------------------------------------------

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.doctest', 'sphinx.ext.mathjax', 'sphinx_rtd_theme']

# Module docstrings show the ``>>>`` usage of shipped files and data
# directories, so they are not collected as doctests.
doctest_test_doctest_blocks = ''

autodoc_member_order = 'bysource'

templates_path = ['_templates']

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store', 'examples', 'SPEC_FULL.md', 'DESIGN.md']


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_static_path = ['_static']
