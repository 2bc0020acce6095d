"""A small experiment matrix and its report.

Runs MPC and Stanley on two tracks with and without the perturbations, writes
one trace CSV per episode plus a summary, and re-derives every summary number
from the traces.
"""
from glclab.harness import SuiteConfig, report, run_suite

cfg = SuiteConfig(controllers=("mpc", "stanley"), tracks=("oval", "chicane"), laps=1.0,
                  out_dir="demo_out/suite")
rows, summary = run_suite(cfg, log=print)
text, problems = report(summary)
print()
print(text)
print("summary matches traces" if not problems else "\n".join(problems))
