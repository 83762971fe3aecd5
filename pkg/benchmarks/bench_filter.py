from pmc_volatility.autodiff import Tape, backward
from pmc_volatility.training import ModelSpec, sequence_loss

from .common import setup_dataset

model_specs = {
    "garch": {"kind": "garch"},
    "pmc2-garch": {"kind": "pmc", "n_states": 2, "base": "garch"},
    "pmc3-fnn23": {"kind": "pmc", "n_states": 3, "base": "fnn23"},
    "hmc2": {"kind": "hmc", "n_states": 2},
}


class FilterBenchmark:
    params = list(model_specs)

    def setup(self, name):
        self.model = ModelSpec(**model_specs[name]).build(0)
        self.pairs = setup_dataset().series.pairs()

    def time_forward_filter(self, name):
        self.model.filter(self.pairs)

    def time_forward_backward(self, name):
        tape = Tape()
        result = self.model.filter(self.pairs, tape)
        loss = sequence_loss(result.predictions, [y[0] for y in self.pairs[1:]])
        backward(tape, loss)


class MemoryFilterBenchmark:
    params = ["pmc2-garch", "pmc3-fnn23"]

    def setup(self, name):
        self.model = ModelSpec(**model_specs[name]).build(0)
        self.pairs = setup_dataset().series.pairs()

    def peakmem_recorded_filter(self, name):
        self.model.filter(self.pairs, Tape())
