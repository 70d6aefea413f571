#include "splatflow/core.hpp"
