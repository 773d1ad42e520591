from scenetree.cli import app

app(prog_name="scenetree")
