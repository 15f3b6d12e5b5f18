"""Bundle in, bundle out: the batch pipeline behind the ``calibq`` command.

Run with ``python demos/05_pipeline.py``. The equivalent shell session is::

    calibq gram -i acts.clqb -o grams.clqb
    calibq init -i grams.clqb -o out.clqb --bits 2 --group-size 16 --rank 8 --workers 4
    calibq report out.clqb --format table
"""

# %% Pack synthetic layers and their activations into a bundle
import tempfile
from pathlib import Path

from calibq.cli import RunConfig, gram_bundle, main, run
from calibq.synthetic import layer_suite, suite_bundle
from calibq.tensor_store import read_bundle, write_bundle

work = Path(tempfile.mkdtemp())
write_bundle(suite_bundle(layer_suite(seed=5, count=4, m_range=(32, 48), n_range=(32, 48))), work / "acts.clqb")

# %% Replace raw activations with Gram matrices, which is all the pipeline needs
gram_bundle(str(work / "acts.clqb"), str(work / "grams.clqb"))

# %% Quantize and initialize every layer; the result does not depend on the worker count
cfg = RunConfig(str(work / "grams.clqb"), str(work / "out.clqb"), bits=2, group_size=16, rank=8, workers=4)
status, report = run(cfg)
out = read_bundle(work / "out.clqb")
print("exit status", status)
print("entries for layer00:", [n for n in out.names() if n.startswith("layer00/")])

# %% The report travels inside the output bundle
main(["report", str(work / "out.clqb"), "--format", "table"])
