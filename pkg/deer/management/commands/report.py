from deer.management.commands._stage import StageCommand
from deer.pipeline import stage_report


class Command(StageCommand):
    help = "Aggregate learning curves into normalized-return tables."

    def run_stage(self, config, **options):
        return stage_report(config)
