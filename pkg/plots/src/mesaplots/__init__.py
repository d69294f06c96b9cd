"""Post-hoc figure rendering for mesalab experiment directories.

This package never recomputes any science: every number it draws comes from
the CSV/JSON artifacts the experiment CLI emitted.  Rendering is a pure
function of the input files and the figure spec (fixed styling, no
timestamps), so regenerated figures are byte-identical.
"""

from mesaplots.figures import FigureSpec, RenderError, render

__all__ = ["FigureSpec", "RenderError", "render"]
__version__ = "0.1.0"
