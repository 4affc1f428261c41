#include "drmo/pipeline.hpp"
#include "drmo/tensor.hpp"

int main(int argc, char** argv)
{
    drmo::tune_allocator();
    return drmo::pipeline::cli_main(argc, argv);
}
