"""Synthetic braking-intent recordings and how they are cut into training segments.

One participant is generated for each experiment kind. The countdown trials are
segmented into five windows (only the last one, before "stop", is positive), and
the Cz grand average shows the slow negative drift that the classifier learns.
"""

import numpy as np

from fewshot_csnn.eeg import (FCAS_CHANNELS, KINDS, GeneratorConfig, build_dataset, duplicate_positives,
                              generate_participant, grand_average, select_channels)

config = GeneratorConfig.desk_scale()

for kind in KINDS:
    trials = generate_participant(config, participant=0, kind=kind)
    ds = build_dataset(trials)
    neg, pos = ds.counts()
    print(f"{kind:19s} {len(trials):3d} trials -> {len(ds):3d} segments "
          f"({pos} positive, {neg} negative), shape {ds.data.shape[1:]}")

# the anticipation shift is invisible in single trials but clear on average
trials = generate_participant(GeneratorConfig(participants=1, trials={k: 60 for k in KINDS}), 0,
                              "countdown-nominal")
lags, wave = grand_average(trials, "Cz", "1")
ms = lags * 2  # 500 Hz
for lo in range(0, 1000, 200):
    sel = (ms >= lo) & (ms < lo + 200)
    print(f"Cz after the last count, {lo:4d}-{lo + 200:4d} ms: {wave[sel].mean():7.2f} uV")

ds = build_dataset(generate_participant(config, 0, "countdown-nominal"))
five = select_channels(ds, FCAS_CHANNELS)
print("5-channel subset:", five.channels, five.data.shape)
print("after duplicating positives:", duplicate_positives(ds).counts())
print("int8 range used:", int(ds.data.min()), int(ds.data.max()), "| mean |x|:", np.abs(ds.data).mean().round(1))
