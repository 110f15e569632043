"""pdflow: desk-scale pseudo-differential flow toolkit on the torus.

Modules:
  symbols    expression-tree symbols, grids, norms, class checks
  dsl        text mini-language and canonical printer
  quantize   semiclassical / Weyl quantization, Sobolev norms, filters
  calculus   composition expansion terms and remainder probes
  corrector  corrector hierarchies and approximate propagators
  flow       reference linear and semilinear flows
  semigroup  growth-rate experiments, bounds, instability demo
  garding    flow-based lower-bound verification
  cli        config-driven experiment runner
"""

__version__ = "0.1.0"
