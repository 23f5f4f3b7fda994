// Copyright 2026 The Veilbreak Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Umbrella header.

#include "veilbreak/attack.hpp"
#include "veilbreak/cache.hpp"
#include "veilbreak/corpus.hpp"
#include "veilbreak/errors.hpp"
#include "veilbreak/eval_client.hpp"
#include "veilbreak/hash.hpp"
#include "veilbreak/http.hpp"
#include "veilbreak/metrics.hpp"
#include "veilbreak/orchestrator.hpp"
#include "veilbreak/parallel.hpp"
#include "veilbreak/probe.hpp"
#include "veilbreak/prompt.hpp"
#include "veilbreak/report.hpp"
#include "veilbreak/response.hpp"
