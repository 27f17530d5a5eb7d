#pragma once

#include "archspec.hpp"
#include "bound.hpp"
#include "dictionary.hpp"
#include "gram.hpp"
#include "minimize.hpp"
#include "potential.hpp"
#include "sparse.hpp"
