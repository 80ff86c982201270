"""CLI subcommands; each module exposes register(subparsers) and async handle(args)."""
