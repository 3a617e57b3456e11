from backend.app import create_app

cli = create_app()

if __name__ == '__main__':
    cli(prog_name='ilm')
