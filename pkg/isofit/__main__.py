from isofit.cli import main

main()
