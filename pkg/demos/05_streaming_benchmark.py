"""Streaming inference and throughput.

Each new frame costs one pass of the counting network; the maps of the
previous frames are cached, so the temporal stack only adds its own pass.
"""

import numpy as np

from tancount.bench import StreamingCounter, available_cores, count_params, fps_bench
from tancount.dataio import synth_video
from tancount.lcn import LcnModel
from tancount.tan import TanConfig, TanModel

lcn = LcnModel.init(seed=0, scheme="he")
tan = TanModel.init(TanConfig())
print("parameters:", count_params(lcn, tan))

# %% results trail the input by k frames; flush() emits the tail
seq = synth_video(walkers=8, frames=6, size=(64, 96), seed=0).sequences[0]
counter = StreamingCounter(lcn, tan)
for i in range(len(seq)):
    got = counter.push(seq.image(i))
    print(f"pushed frame {i}, emitted {[r.frame for r in got]}")
print("flush emitted", [r.frame for r in counter.flush()])

# %% throughput at 320x240
for threads in sorted({1, available_cores()}):
    rep = fps_bench(lcn, tan, resolution=(320, 240), n_frames=200, threads=threads)
    print(f"{threads} thread(s): {rep.fps:.1f} FPS ({rep.precision})")
