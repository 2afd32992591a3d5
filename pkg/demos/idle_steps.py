"""
Idle steps and the idle step ratio
==================================

In masked diffusion a reverse step is idle when nothing gets unmasked.
Splitting tokens into l sub-tokens multiplies the number of entries that can
change, so idle steps become rare.
"""

import numpy as np

from primemdm import get_schedule
from primemdm.analytics import (expected_idle_steps, isr, isr_elbow, large_t_idle_approx,
                                simulate_idle_runs)

sch = get_schedule("linear")
T, L = 1024, 1024

# closed form next to the large-T approximation T exp(-L/T)
print("expected idle steps, l=1:", round(expected_idle_steps(sch, T, L), 2))
print("large-T approximation:   ", round(large_t_idle_approx(T, L), 2))

print("\n l   ISR (%)")
for l in (1, 2, 3, 4, 6, 8):
    print(f"{l:2d}   {100 * isr(sch, T, L, l):6.2f}")

# simulate the masking process alone and compare with the formula
rng = np.random.default_rng(0)
for l in (1, 2, 4):
    counts = simulate_idle_runs(sch, T, L * l, 10, rng)
    se = counts.std(ddof=1) / np.sqrt(len(counts))
    print(f"l={l}: simulated {counts.mean():7.1f} +- {se:4.1f}, "
          f"analytic {expected_idle_steps(sch, T, L * l):7.2f}")

# where does adding digits stop paying off?
print("\nelbow, text-sized sequences (L=1024):", isr_elbow(sch, T, 1024, [1, 2, 3, 4, 6, 8]))
print("elbow, image-sized sequences (L=3072):", isr_elbow(sch, T, 3072, [1, 2, 3, 4]))
