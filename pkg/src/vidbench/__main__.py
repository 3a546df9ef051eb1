from vidbench.cli import main

main()
