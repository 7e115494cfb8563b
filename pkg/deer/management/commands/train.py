from deer.management.commands._stage import StageCommand
from deer.pipeline import stage_train


class Command(StageCommand):
    help = "Train SAC agents over the delay grid for the selected modes and seeds."
    uses_modes = True

    def run_stage(self, config, **options):
        return stage_train(config, modes=options["modes"], seeds=options["seeds"])
