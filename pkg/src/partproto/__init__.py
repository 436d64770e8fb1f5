"""Part-prototype image classifiers with a concept-level interactive debugger.

Subpackage map:
  autodiff  - reverse-mode tensor library (numpy float64)
  data      - synthetic confounded dataset generator and on-disk format
  model     - embedding net, prototype layer, aggregation, checkpoints
  losses    - training and debugging objectives
  training  - optimizers and the staged training loops
  explain   - attribution maps, cutouts, display patches
  metrics   - F1, confusion, activation precision
  debugger  - interactive debugging rounds and session reports
  cli       - command-line entry points
  service   - HTTP JSON API over a debug session
"""

__version__ = "0.1.0"
