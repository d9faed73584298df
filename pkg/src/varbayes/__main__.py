from varbayes.cli import main

main()
