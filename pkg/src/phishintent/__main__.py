from phishintent.cli import run

run()
