"""Two-stage pipeline on synthetic pelvic phantoms: predict a dose map
from CT and structure masks, then regress the treatment-plan parameters
from the prediction. Ships its own reverse-mode autodiff engine, an
exact dosimetric oracle for ground truth, and a metric suite."""

__version__ = "0.1.0"
