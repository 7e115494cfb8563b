from deer.management.commands._stage import StageCommand
from deer.pipeline import stage_collect


class Command(StageCommand):
    help = "Collect random and expert trajectory datasets for every configured preset."

    def run_stage(self, config, **options):
        return stage_collect(config)
