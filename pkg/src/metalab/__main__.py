from metalab.lab.cli import main

main()
