#include "alp/expcli/expcli.hpp"

int main(int argc, char** argv)
{
    return alp::expcli::cli_main(argc, argv);
}
