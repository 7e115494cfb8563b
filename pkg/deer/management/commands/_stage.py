from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from deer.exceptions import DeerError
from deer.pipeline import MODES, load_config


class StageCommand(BaseCommand):
    """Shared options and error translation for the experiment stages."""

    uses_modes = False

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="path to the experiment YAML file")
        if self.uses_modes:
            parser.add_argument("--mode", nargs="+", choices=MODES, default=["deer"])
            parser.add_argument("--seeds", nargs="+", type=int, default=None,
                                help="subset of the configured seeds (default: all)")

    def handle(self, *args, **options):
        try:
            config = load_config(options["config"])
            if self.uses_modes:
                seeds = options["seeds"]
                unknown = set(seeds or ()) - set(config.seeds)
                if unknown:
                    raise CommandError(f"seeds {sorted(unknown)} are not in the config's seed list")
                written = self.run_stage(config, modes=options["mode"], seeds=seeds)
            else:
                written = self.run_stage(config)
        except ValidationError as exc:
            raise CommandError(f"invalid config: {exc.detail}") from exc
        except DeerError as exc:
            raise CommandError(str(exc)) from exc
        for path in written:
            self.stdout.write(f"  {path}")
        self.stdout.write(self.style.SUCCESS(f"{self.stage_name}: wrote {len(written)} artifacts"))

    @property
    def stage_name(self):
        return self.__module__.rsplit(".", 1)[-1]

    def run_stage(self, config, **options):
        raise NotImplementedError
