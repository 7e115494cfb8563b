from deer.management.commands._stage import StageCommand
from deer.pipeline import stage_eval


class Command(StageCommand):
    help = "Evaluate trained policies with deterministic actions."
    uses_modes = True

    def run_stage(self, config, **options):
        return stage_eval(config, modes=options["modes"], seeds=options["seeds"])
