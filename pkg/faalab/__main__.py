from faalab.cli import main

main()
