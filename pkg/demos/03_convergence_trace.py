"""Watch the optimizer settle, one sweep at a time.

Prints the objective on the binary codes, the three constraint residuals
and the penalty weight mu after every sweep.  mu doubles each time, which
drives ||Z - B|| and the factorisation residuals down while the objective
flattens out; the run stops once the objective moves by less than
``rel_tol`` over three sweeps.  The trace is also written to trace.csv.

    python demos/03_convergence_trace.py [out.csv]
"""

import sys

from dsth import DsthConfig, fit
from dsth.data import synthesize_dataset
from dsth.pipeline import AnchorParams, build_anchors

data = synthesize_dataset(3, 50, 32, 16, noise=0.05, cross_modal_consistency=1.0, seed=1)
anchors = build_anchors(data.visual, AnchorParams(k=50), seed=1)

cfg = DsthConfig(code_length=16, max_iter=50, rel_tol=1e-4, seed=1)

result = fit(data.visual, data.text, anchors, cfg)
t = result.trace

print("%4s %14s %11s %11s %11s %10s" % ("iter", "objective", "res_x", "res_y", "res_zb", "mu"))
print("%4d %14.6g" % (0, t.initial_objective))
for i in range(len(t)):
    print("%4d %14.6g %11.3g %11.3g %11.3g %10.3g"
          % (i + 1, t.objective[i], t.res_x[i], t.res_y[i], t.res_zb[i], t.mu[i]))
drop = 1 - t.objective[-1] / t.initial_objective
print("objective fell by %.0f%% over %d sweeps" % (100 * drop, len(t)))

out = sys.argv[1] if len(sys.argv) > 1 else "trace.csv"
t.to_csv(out)
print("wrote", out)
