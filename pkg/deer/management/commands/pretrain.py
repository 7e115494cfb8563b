from deer.management.commands._stage import StageCommand
from deer.pipeline import stage_pretrain


class Command(StageCommand):
    help = "Pretrain the seq2seq encoders on the collected datasets."

    def run_stage(self, config, **options):
        return stage_pretrain(config)
