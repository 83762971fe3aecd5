from pmc_volatility.training import ModelSpec, TrainConfig, run_experiment, train

from .common import setup_dataset


class TrainingBenchmark:
    params = ["garch", "pmc2-garch"]
    timeout = 600

    def setup(self, name):
        fields = {"kind": "garch"}
        if name == "pmc2-garch":
            fields = {"kind": "pmc", "n_states": 2, "base": "garch"}
        self.spec = ModelSpec(**fields)
        self.dataset = setup_dataset(200)

    def time_train_ten_epochs(self, name):
        model = self.spec.build(0)
        train(model, self.dataset.train, self.dataset.val, TrainConfig(epochs=10))

    def time_experiment_two_seeds(self, name):
        run_experiment(
            self.dataset, self.spec, n_seeds=2, config=TrainConfig(epochs=5), workers=2
        )
