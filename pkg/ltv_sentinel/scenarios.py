# --- Built-in scenario documents --- #

# Two-state unstable plant under PI feedback, impulsive fault on x1 at k = 201.
# P0 is 0.0025·I because the default I leaves the unmeasured x2 direction with
# 1 - 60 < 0 in the alpha = 60 information matrix at step 0.
# tau is the 99th percentile of per-run maxima of h over 200 fault-free runs;
# fault-free h grows with the random walk, so those maxima vary widely by seed.
paper_scenario = """
dims:
  n: 2
  l: 1
  p: 1
  m: 2

system:
  A: [[0.5, 1.0], [0.0, 1.2]]
  B: [[0.0], [1.0]]
  C: [[1.0, 0.0]]
  D: [[0.0]]
  Q: [[0.0025, 0.0], [0.0, 0.0025]]
  R: [[0.0025]]

noise:
  kind: paper_random_walk
  seed: 0
  coupling: [[1.0], [1.0]]
  independent_driver: false
  scale: 1.0

fault:
  kind: impulse
  onset: 201
  theta: [1.5, 0.0]

controller:
  kind: discrete_pi
  kp: 0.209
  ki: 0.0011
  sign: -1.0

simulation:
  horizon: 400
  x0: [0.0, 0.0]

filter:
  kind: hinf
  alpha: 60.0
  S: [[1.0, 0.0], [0.0, 1.0]]
  L: [[1.0, 0.0], [0.0, 1.0]]
  P0: [[0.0025, 0.0], [0.0, 0.0025]]

detector:
  s: 20
  gamma: 1.0e-6
  window: 100
  tau_scale: 1.0
  percentile: 99.0
  tau_statistic: run_max

experiment:
  seeds: {start: 0, count: 100}
  calibration_seeds: {start: 10000, count: 200}
  theta_cases:
    - [1.5, 0.0]
    - [0.6, 0.0]
  alphas: [0.0, 20.0, 60.0]
  figure_seed: 20240601
"""

# Same plant with gaussian noise and a step fault entering through x2.
step_fault_scenario = """
dims:
  n: 2
  l: 1
  p: 1
  m: 1

system:
  A: [[0.5, 1.0], [0.0, 1.2]]
  B: [[0.0], [1.0]]
  C: [[1.0, 0.0]]
  D: [[0.0]]
  Q: [[0.0025, 0.0], [0.0, 0.0025]]
  R: [[0.0025]]

noise:
  kind: gaussian
  seed: 0

fault:
  kind: step
  onset: 150
  theta: [0.05]
  profile: [[0.0], [1.0]]

controller:
  kind: discrete_pi
  kp: 0.209
  ki: 0.0011

simulation:
  horizon: 300

filter:
  kind: kalman
  P0: [[0.0025, 0.0], [0.0, 0.0025]]

detector:
  s: 20
  window: 100
"""

builtin_scenarios = {
    "paper": paper_scenario,
    "step": step_fault_scenario,
}
