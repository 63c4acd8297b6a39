from adls.cli import app

app()
