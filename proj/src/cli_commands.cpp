#include "polar/cli_commands.hpp"
