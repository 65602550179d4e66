/*
 Copyright 2026 The blq-turnpike Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/


#pragma once

// Umbrella header for the blq-turnpike library.

#include "blq/bsde.hpp"
#include "blq/cli.hpp"
#include "blq/dynamics.hpp"
#include "blq/errors.hpp"
#include "blq/hypotheses.hpp"
#include "blq/io.hpp"
#include "blq/linalg.hpp"
#include "blq/numerics.hpp"
#include "blq/problem.hpp"
#include "blq/riccati.hpp"
#include "blq/static_opt.hpp"
#include "blq/turnpike.hpp"
#include "blq/version.hpp"
